//! File formats: the WMT1 tensor container, CSV datasets, JSON reports and
//! the sweep CSV.
//!
//! WMT1 layout, little-endian throughout:
//!
//! ```text
//! magic      4 bytes  "WMT1"
//! version    u16      1
//! count      u32      number of tensors
//! per tensor:
//!   name_len u16, name (UTF-8, name_len bytes)
//!   dtype    u8       0 = float32, 1 = float16, 2 = int32, 3 = uint8
//!   ndim     u8
//!   dims     u32 x ndim
//!   data     product(dims) * size_of(dtype) bytes
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attacks::TamperTruth;
use crate::error::{Error, Result};
use crate::keymat::WatermarkKey;
use crate::tensor::{DType, LayerTensor, Model, OpaqueTensor, TensorEntry};
use crate::toynet::{Dataset, Samples, Split};
use crate::wmcore::{ParamStatus, RecoveryStats, ReportSummary, VerificationReport};

pub const MAGIC: &[u8; 4] = b"WMT1";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode_container(model: &Model) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for e in &model.entries {
        if !seen.insert(e.name()) {
            return Err(Error::DuplicateName(e.name().to_string()));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(model.len()).map_err(|_| too_large("tensor count"))?.to_le_bytes());
    for e in &model.entries {
        let name = e.name().as_bytes();
        out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| too_large("tensor name"))?.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.dtype().tag());
        out.push(u8::try_from(e.shape().len()).map_err(|_| too_large("ndim"))?);
        for &d in e.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_large("dimension"))?.to_le_bytes());
        }
        match e {
            TensorEntry::Float32(t) => {
                for w in &t.words {
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
            TensorEntry::Opaque(t) => {
                let expected = t.shape.iter().product::<usize>() * t.dtype.size();
                if expected != t.bytes.len() {
                    return Err(Error::LengthMismatch { expected, actual: t.bytes.len() });
                }
                out.extend_from_slice(&t.bytes);
            }
        }
    }
    Ok(out)
}

fn too_large(what: &str) -> Error {
    Error::Shape(format!("{what} does not fit the container format"))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(Error::Truncated { offset: self.pos, needed: n - remaining });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_container(buf: &[u8]) -> Result<Model> {
    let mut cur = Cursor { buf, pos: 0 };
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    cur.take(4)?;
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = cur.u32()?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name_offset = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::BadName { offset: name_offset })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let tag_offset = cur.pos;
        let tag = cur.u8()?;
        let dtype = DType::from_tag(tag).ok_or(Error::UnknownDtype { tag, offset: tag_offset })?;
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let elements = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| too_large("tensor"))?;
        let bytes = cur.take(elements.checked_mul(dtype.size()).ok_or_else(|| too_large("tensor"))?)?;
        entries.push(match dtype {
            DType::Float32 => TensorEntry::Float32(LayerTensor {
                name,
                shape,
                words: bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
            }),
            _ => TensorEntry::Opaque(OpaqueTensor { name, dtype, shape, bytes: bytes.to_vec() }),
        });
    }
    if cur.pos != buf.len() {
        return Err(Error::TrailingBytes { offset: cur.pos });
    }
    Ok(Model::new(entries))
}

pub fn write_container(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

pub const SPLIT_COLUMN: &str = "split";

/// Reads a numeric CSV with a header row. `label_column` holds the class;
/// every other column except an optional `split` column is a feature. With a
/// `split` column (`train` / `validation` / `test`) rows keep their assigned
/// split; otherwise rows are shuffled with `seed` and split 60/20/20.
pub fn load_csv_dataset(path: impl AsRef<Path>, label_column: &str, seed: u64) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(file);
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Dataset(format!("no column named `{label_column}`")))?;
    let split_idx = headers.iter().position(|h| h == SPLIT_COLUMN);
    let features: Vec<usize> = (0..headers.len()).filter(|&i| i != label_idx && Some(i) != split_idx).collect();
    if features.is_empty() {
        return Err(Error::Dataset("no feature columns".into()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut splits: Vec<Split> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => Error::Dataset(format!("ragged row {}", r + 2)),
            _ => Error::Csv(e),
        })?;
        let row = features
            .iter()
            .map(|&i| {
                let cell = record[i].trim();
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Dataset(format!("non-numeric cell `{cell}` in row {}", r + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
        raw_labels.push(record[label_idx].trim().to_string());
        if let Some(si) = split_idx {
            splits.push(match record[si].trim() {
                "train" => Split::Train,
                "validation" => Split::Validation,
                "test" => Split::Test,
                other => return Err(Error::Dataset(format!("unknown split `{other}` in row {}", r + 2))),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Dataset("no data rows".into()));
    }

    let (labels, classes) = encode_labels(&raw_labels);
    let mut all = Samples::new(features.len());
    for (row, &y) in rows.iter().zip(&labels) {
        all.push(row, y);
    }
    if split_idx.is_some() {
        let pick = |s: Split| {
            let idx: Vec<usize> = (0..all.len()).filter(|&i| splits[i] == s).collect();
            all.subset(&idx)
        };
        return Ok(Dataset {
            classes,
            train: pick(Split::Train),
            validation: pick(Split::Validation),
            test: pick(Split::Test),
        });
    }
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Dataset::from_ordered(classes, &all.subset(&order)))
}

/// Integer labels are used as-is; anything else is mapped to indices in
/// sorted order.
fn encode_labels(raw: &[String]) -> (Vec<usize>, usize) {
    if let Ok(ints) = raw.iter().map(|s| s.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>() {
        let classes = ints.iter().max().map_or(0, |m| m + 1).max(2);
        return (ints, classes);
    }
    let mut names: Vec<&String> = raw.iter().collect();
    names.sort();
    names.dedup();
    let index: HashMap<&String, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    (raw.iter().map(|s| index[s]).collect(), names.len().max(2))
}

/// Writes a dataset as CSV with columns `x0..x{d-1}, label, split`.
pub fn write_csv_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    header.push(SPLIT_COLUMN.into());
    w.write_record(&header)?;
    for split in [Split::Train, Split::Validation, Split::Test] {
        let s = data.split(split);
        for i in 0..s.len() {
            let mut rec: Vec<String> = s.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(s.labels[i].to_string());
            rec.push(split.name().into());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerReportJson {
    pub name: String,
    pub n: usize,
    pub self_fail: Vec<usize>,
    pub mutual_suspect: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SummaryJson {
    #[serde(flatten)]
    pub counts: ReportSummary,
    pub layers: usize,
    pub unprotected: Vec<String>,
}

/// Serialized verification report. Carries the key fingerprint, never the key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReportJson {
    pub model: String,
    pub key_fingerprint: String,
    pub per_layer: Vec<LayerReportJson>,
    pub summary: SummaryJson,
}

impl ReportJson {
    pub fn new(model: &str, key: &WatermarkKey, report: &VerificationReport) -> Self {
        ReportJson {
            model: model.to_string(),
            key_fingerprint: fingerprint_hex(key),
            per_layer: report
                .layers
                .iter()
                .map(|l| LayerReportJson {
                    name: l.name.clone(),
                    n: l.statuses.len(),
                    self_fail: l.indices_with(ParamStatus::SelfFail),
                    mutual_suspect: l.indices_with(ParamStatus::MutualSuspect),
                })
                .collect(),
            summary: SummaryJson {
                counts: report.summary(),
                layers: report.layers.len(),
                unprotected: report.unprotected.clone(),
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn fingerprint_hex(key: &WatermarkKey) -> String {
    format!("{:016x}", key.fingerprint())
}

pub fn write_report(model: &str, key: &WatermarkKey, report: &VerificationReport, path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &ReportJson::new(model, key, report).to_json()?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoveryJson {
    pub model: String,
    pub key_fingerprint: String,
    #[serde(flatten)]
    pub stats: RecoveryStats,
    pub flagged_self_fail: usize,
}

pub fn write_recovery_stats(model: &str, key: &WatermarkKey, stats: RecoveryStats, path: impl AsRef<Path>) -> Result<()> {
    let json = RecoveryJson {
        model: model.to_string(),
        key_fingerprint: fingerprint_hex(key),
        stats,
        flagged_self_fail: stats.restored_exact + stats.zeroed,
    };
    write_text(path, &(serde_json::to_string_pretty(&json)? + "\n"))
}

pub fn write_truth(truth: &TamperTruth, path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(truth)? + "\n"))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<TamperTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Column order of the sweep CSV.
pub const SWEEP_COLUMNS: [&str; 10] = [
    "rate",
    "trials",
    "detection_recall",
    "false_positive_rate",
    "restored_exact_frac",
    "zeroed_frac",
    "acc_clean",
    "acc_watermarked",
    "acc_attacked",
    "acc_recovered",
];

/// One averaged sweep row. Field order is the CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub rate: f64,
    pub trials: usize,
    pub detection_recall: f64,
    pub false_positive_rate: f64,
    pub restored_exact_frac: f64,
    pub zeroed_frac: f64,
    pub acc_clean: f64,
    pub acc_watermarked: f64,
    pub acc_attacked: f64,
    pub acc_recovered: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(SWEEP_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &sweep_csv(rows)?)
}

fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wmcore::LayerReport;
    use std::io::Write;

    fn tmp_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_and_tiny_container_sizes() {
        assert_eq!(encode_container(&Model::default()).unwrap().len(), 10);
        let m = Model::from_layers(vec![LayerTensor::vector("w", vec![0x3F80_0000])]);
        let bytes = encode_container(&m).unwrap();
        assert_eq!(bytes.len(), 23);
        assert_eq!(
            bytes,
            [
                b'W', b'M', b'T', b'1', 1, 0, 1, 0, 0, 0, 1, 0, b'w', 0, 1, 1, 0, 0, 0, 0, 0, 0x80,
                0x3F
            ]
        );
        assert_eq!(decode_container(&bytes).unwrap(), m);
    }

    #[test]
    fn decode_errors() {
        let m = Model::from_layers(vec![LayerTensor::vector("w", vec![1, 2, 3])]);
        let good = encode_container(&m).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode_container(&bad).unwrap_err().to_string(), "bad magic");

        let err = decode_container(&good[..good.len() - 2]).unwrap_err();
        // payload of the only tensor starts after 10 + 2 + 1 + 1 + 1 + 4 bytes
        assert!(matches!(err, Error::Truncated { offset: 19, needed: 2 }), "{err}");

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_container(&bad), Err(Error::UnsupportedVersion(2))));

        let mut bad = good.clone();
        bad[13] = 9; // dtype tag follows the 1-byte name
        assert!(matches!(decode_container(&bad), Err(Error::UnknownDtype { tag: 9, offset: 13 })));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_container(&bad), Err(Error::TrailingBytes { .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let m = Model::from_layers(vec![
            LayerTensor::vector("a", vec![1]),
            LayerTensor::vector("a", vec![2]),
        ]);
        assert!(matches!(encode_container(&m), Err(Error::DuplicateName(_))));
    }

    #[test]
    fn opaque_tensors_are_carried() {
        let m = Model::new(vec![
            TensorEntry::Opaque(OpaqueTensor {
                name: "steps".into(),
                dtype: DType::Int32,
                shape: vec![2],
                bytes: vec![1, 0, 0, 0, 2, 0, 0, 0],
            }),
            TensorEntry::Float32(LayerTensor::vector("w", vec![7, 8])),
            TensorEntry::Opaque(OpaqueTensor {
                name: "half".into(),
                dtype: DType::Float16,
                shape: vec![1, 3],
                bytes: vec![1, 2, 3, 4, 5, 6],
            }),
        ]);
        let bytes = encode_container(&m).unwrap();
        assert_eq!(decode_container(&bytes).unwrap(), m);
    }

    #[test]
    fn csv_small_file() {
        let f = tmp_csv("a,b,label\n1.5,2,0\n-3,4.25,1\n0,0,1\n");
        let d = load_csv_dataset(f.path(), "label", 0).unwrap();
        assert_eq!(d.train.len() + d.validation.len() + d.test.len(), 3);
        assert_eq!(d.classes, 2);
        let mut rows: Vec<(Vec<f64>, usize)> = [&d.train, &d.validation, &d.test]
            .iter()
            .flat_map(|s| (0..s.len()).map(|i| (s.row(i).to_vec(), s.labels[i])).collect::<Vec<_>>())
            .collect();
        rows.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]));
        assert_eq!(rows, vec![(vec![-3.0, 4.25], 1), (vec![0.0, 0.0], 1), (vec![1.5, 2.0], 0)]);
    }

    #[test]
    fn csv_errors() {
        let f = tmp_csv("a,b,label\n");
        assert!(matches!(load_csv_dataset(f.path(), "label", 0), Err(Error::Dataset(_))));
        let f = tmp_csv("a,b,label\n1,2,0\n1,2\n");
        let e = load_csv_dataset(f.path(), "label", 0).unwrap_err();
        assert!(e.to_string().contains("ragged"), "{e}");
        let f = tmp_csv("a,b,label\n1,x,0\n");
        assert!(load_csv_dataset(f.path(), "label", 0).unwrap_err().to_string().contains("non-numeric"));
        let f = tmp_csv("a,b,label\n1,2,0\n");
        assert!(load_csv_dataset(f.path(), "class", 0).unwrap_err().to_string().contains("class"));
    }

    #[test]
    fn csv_split_sizes() {
        let mut body = String::from("x,y\n");
        for i in 0..100 {
            body.push_str(&format!("{i},{}\n", i % 3));
        }
        let f = tmp_csv(&body);
        let d = load_csv_dataset(f.path(), "y", 4).unwrap();
        assert_eq!((d.train.len(), d.validation.len(), d.test.len()), (60, 20, 20));
        assert_eq!(d.classes, 3);
        assert_eq!(d, load_csv_dataset(f.path(), "y", 4).unwrap());
    }

    #[test]
    fn string_labels_are_indexed() {
        let f = tmp_csv("x,kind\n1,dog\n2,cat\n3,dog\n");
        let d = load_csv_dataset(f.path(), "kind", 0).unwrap();
        let all: Vec<(f64, usize)> = [&d.train, &d.validation, &d.test]
            .iter()
            .flat_map(|s| (0..s.len()).map(|i| (s.row(i)[0], s.labels[i])).collect::<Vec<_>>())
            .collect();
        for (x, y) in all {
            assert_eq!(y, if x == 2.0 { 0 } else { 1 });
        }
    }

    #[test]
    fn dataset_csv_round_trip_keeps_splits() {
        let data = crate::toynet::gen_blobs(3, 20, 3, 3, 2.0, 0.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_csv_dataset(&data, &p).unwrap();
        assert_eq!(load_csv_dataset(&p, "label", 99).unwrap(), data);
    }

    #[test]
    fn clean_report_json_is_exact() {
        let key = WatermarkKey::new(0);
        let report = VerificationReport {
            layers: vec![LayerReport { name: "fc0.weight".into(), layer_index: 0, statuses: vec![ParamStatus::Intact; 2] }],
            unprotected: vec![],
        };
        let json = ReportJson::new("toy.wmt", &key, &report).to_json().unwrap();
        let expected = r#"{
  "model": "toy.wmt",
  "key_fingerprint": "e220a8397b1dcdaf",
  "per_layer": [
    {
      "name": "fc0.weight",
      "n": 2,
      "self_fail": [],
      "mutual_suspect": []
    }
  ],
  "summary": {
    "total_parameters": 2,
    "intact": 2,
    "self_fail": 0,
    "mutual_suspect": 0,
    "layers": 1,
    "unprotected": []
  }
}
"#;
        assert_eq!(json, expected);
    }

    #[test]
    fn report_never_contains_master() {
        let key = WatermarkKey::new(0x1234_5678_9ABC_DEF0);
        let json = ReportJson::new("m", &key, &VerificationReport::default()).to_json().unwrap();
        assert!(!json.contains("123456789abcdef0"));
        assert!(!json.contains(&key.master().to_string()));
    }

    #[test]
    fn sweep_header_is_exact() {
        let csv = sweep_csv(&[]).unwrap();
        assert_eq!(
            csv,
            "rate,trials,detection_recall,false_positive_rate,restored_exact_frac,zeroed_frac,acc_clean,acc_watermarked,acc_attacked,acc_recovered\n"
        );
        let row = SweepRow {
            rate: 0.1,
            trials: 2,
            detection_recall: 1.0,
            false_positive_rate: 0.0,
            restored_exact_frac: 0.9,
            zeroed_frac: 0.1,
            acc_clean: 0.95,
            acc_watermarked: 0.94,
            acc_attacked: 0.5,
            acc_recovered: 0.93,
        };
        let csv = sweep_csv(&[row]).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "0.1,2,1.0,0.0,0.9,0.1,0.95,0.94,0.5,0.93");
    }
}
