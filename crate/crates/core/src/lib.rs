//! Pyramid pixel context adaption (PPCA) attention, the PPCANet residual
//! classifier and its hybrid cross-entropy / supervised-contrastive objective.
//!
//! Everything runs on a small 64-bit reverse-mode autodiff engine in
//! [`tensor`], sized for desk-scale experiments and exhaustive gradient
//! checking rather than throughput.

/// `as_str`, `Display` and case-insensitive `FromStr` for a fieldless enum.
macro_rules! string_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl std::str::FromStr for $ty {
            type Err = $crate::Error;
            fn from_str(s: &str) -> $crate::Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    _ => Err($crate::Error::invalid(format!(
                        "unknown {} '{s}' (expected one of: {})",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

pub mod backbone;
pub mod complexity;
pub mod config;
pub mod data;
mod error;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod ppca;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

/// Lowercase hex SHA-256 of the concatenated `parts`.
pub fn sha256_hex(parts: &[&[u8]]) -> String {
    use sha2::{Digest, Sha256};
    use std::fmt::Write as _;
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
