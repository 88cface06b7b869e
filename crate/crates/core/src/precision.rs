//! Emulated reduced precision: deterministic value rounding on an f64
//! substrate. Master copies stay f64; activations and gradients are
//! rounded through the selected format each step.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Precision {
    #[default]
    #[serde(rename = "f64")]
    F64,
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "emulated-bf16")]
    Bf16Emu,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
            Precision::Bf16Emu => "emulated-bf16",
        }
    }

    pub fn parse(s: &str) -> Option<Precision> {
        match s {
            "f64" => Some(Precision::F64),
            "f32" => Some(Precision::F32),
            "emulated-bf16" => Some(Precision::Bf16Emu),
            _ => None,
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
            Precision::Bf16Emu => bf16_round(x),
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == Precision::F64 {
            return;
        }
        for x in xs.iter_mut() {
            *x = self.round(*x);
        }
    }
}

/// Truncate the significand to 8 significant bits (1 implicit + 7 stored),
/// the bf16 layout, going through f32 first like a hardware cast would.
fn bf16_round(x: f64) -> f64 {
    let f = x as f32;
    if !f.is_finite() || f == 0.0 {
        return f as f64;
    }
    // Drop the low 16 mantissa bits of the f32 representation.
    let bits = f.to_bits() & 0xffff_0000;
    f32::from_bits(bits) as f64
}
