//! In-memory tensors and the ordered model container they live in.

use crate::bitcodec::{float_to_word, word_to_float};
use crate::error::{Error, Result};

/// Element type tag as stored in a WMT1 container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    Float32,
    Float16,
    Int32,
    UInt8,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::Float32 => 0,
            DType::Float16 => 1,
            DType::Int32 => 2,
            DType::UInt8 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        Some(match tag {
            0 => DType::Float32,
            1 => DType::Float16,
            2 => DType::Int32,
            3 => DType::UInt8,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::Float32 | DType::Int32 => 4,
            DType::Float16 => 2,
            DType::UInt8 => 1,
        }
    }
}

/// A named float32 tensor held as raw bit patterns (row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub words: Vec<u32>,
}

impl LayerTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, words: Vec<u32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != words.len() {
            return Err(Error::LengthMismatch { expected, actual: words.len() });
        }
        Ok(LayerTensor { name: name.into(), shape, words })
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        Self::new(name, shape, values.iter().map(|&v| float_to_word(v)).collect())
    }

    /// A 1-D tensor.
    pub fn vector(name: impl Into<String>, words: Vec<u32>) -> Self {
        let n = words.len();
        LayerTensor { name: name.into(), shape: vec![n], words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn values(&self) -> Vec<f32> {
        self.words.iter().map(|&w| word_to_float(w)).collect()
    }

    pub fn value(&self, i: usize) -> f32 {
        word_to_float(self.words[i])
    }
}

/// Non-float32 tensor carried byte-for-byte and never watermarked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpaqueTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorEntry {
    Float32(LayerTensor),
    Opaque(OpaqueTensor),
}

impl TensorEntry {
    pub fn name(&self) -> &str {
        match self {
            TensorEntry::Float32(t) => &t.name,
            TensorEntry::Opaque(t) => &t.name,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorEntry::Float32(_) => DType::Float32,
            TensorEntry::Opaque(t) => t.dtype,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorEntry::Float32(t) => &t.shape,
            TensorEntry::Opaque(t) => &t.shape,
        }
    }

    pub fn as_float32(&self) -> Option<&LayerTensor> {
        match self {
            TensorEntry::Float32(t) => Some(t),
            TensorEntry::Opaque(_) => None,
        }
    }

    pub fn as_float32_mut(&mut self) -> Option<&mut LayerTensor> {
        match self {
            TensorEntry::Float32(t) => Some(t),
            TensorEntry::Opaque(_) => None,
        }
    }
}

/// Ordered tensor collection. A tensor's layer index is its position here.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Model {
    pub entries: Vec<TensorEntry>,
}

impl Model {
    pub fn new(entries: Vec<TensorEntry>) -> Self {
        Model { entries }
    }

    pub fn from_layers(layers: Vec<LayerTensor>) -> Self {
        Model { entries: layers.into_iter().map(TensorEntry::Float32).collect() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(layer_index, tensor)` for every float32 entry.
    pub fn float_layers(&self) -> impl Iterator<Item = (usize, &LayerTensor)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_float32().map(|t| (i, t)))
    }

    pub fn first_float_layer(&self) -> Option<usize> {
        self.float_layers().next().map(|(i, _)| i)
    }

    pub fn layer(&self, index: usize) -> Option<&LayerTensor> {
        self.entries.get(index).and_then(TensorEntry::as_float32)
    }

    pub fn layer_mut(&mut self, index: usize) -> Option<&mut LayerTensor> {
        self.entries.get_mut(index).and_then(TensorEntry::as_float32_mut)
    }

    pub fn float_parameter_count(&self) -> usize {
        self.float_layers().map(|(_, t)| t.len()).sum()
    }
}
