//! Fragile, keyed watermarking for float32 weight tensors.
//!
//! Every parameter keeps its 11 most significant bits (sign, exponent, two
//! fraction bits). Its remaining bits carry one trainable adaptive bit, an
//! 11-bit mutual field linking it to its predecessor on a keyed ring, and a
//! 9-bit keyed digest of its own top 23 bits. Tampering is detected and
//! localized per parameter, and a tampered parameter's info bits can be
//! rebuilt from its ring successor.
//!
//! ```
//! use tamperseal::{embed_layer, recover_layer, verify_layer, LayerTensor, WatermarkKey};
//!
//! let key = WatermarkKey::new(1234);
//! let layer = LayerTensor::from_f32("w", vec![4], &[0.5, -1.25, 3.0, 0.01]).unwrap();
//! let marked = embed_layer(&layer, &key, 0, None).unwrap();
//! assert!(verify_layer(&marked, &key, 0).unwrap().iter().all(|s| s.is_intact()));
//!
//! let mut tampered = marked.clone();
//! tampered.words[2] = 0x4120_0000; // 10.0
//! let statuses = verify_layer(&tampered, &key, 0).unwrap();
//! let (repaired, stats) = recover_layer(&tampered, &key, 0, &statuses).unwrap();
//! assert_eq!(stats.restored, vec![2]);
//! assert_eq!(repaired.words[2] >> 21, marked.words[2] >> 21);
//! ```

pub mod adaptive;
pub mod attacks;
pub mod bitcodec;
pub mod error;
pub mod keymat;
pub mod store;
pub mod sweep;
pub mod tensor;
pub mod toynet;
pub mod wmcore;

pub use adaptive::{adaptive_bit, adaptive_pass, AdaptiveConfig, AdaptiveOutcome, AdaptivePlan};
pub use attacks::{AttackKind, LayerSelection, LayerTruth, TamperTruth};
pub use bitcodec::{ParamFields, ParamWord};
pub use error::{Error, Result};
pub use keymat::{mix64, WatermarkKey};
pub use store::{read_container, write_container, ReportJson, SweepRow};
pub use tensor::{DType, LayerTensor, Model, TensorEntry};
pub use toynet::{Dataset, Split, ToyModel};
pub use wmcore::{
    embed_layer, embed_model, recover_layer, recover_model, verify_layer, verify_model, LayerChecker,
    ParamStatus, RecoveryStats, VerificationReport,
};
