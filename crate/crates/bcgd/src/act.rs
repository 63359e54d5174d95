//! Uniform activation quantization and its proxy derivatives.
//!
//! The forward activation is a staircase with `2^bits` levels of height
//! `alpha`, saturating at `(2^bits - 1) * alpha`. Its derivative in `x` is
//! zero almost everywhere, so back-propagation substitutes the derivative of
//! the clipped ReLU envelope. The derivative in `alpha` admits several
//! usable substitutes; which one is in effect is selected per quantizer.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ActError {
    #[error("activation resolution must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("activation bit-width must be at least 1, got {0}")]
    InvalidBits(u32),
}

/// Which substitute to use for the derivative of the activation in `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaVariant {
    /// The almost-everywhere exact derivative: the bin index `k` inside each
    /// step, the top level count past saturation.
    Ae,
    /// Three values: 0 below, `2^(bits-1)` across the staircase, the top
    /// level count past saturation.
    ThreeValued,
    /// Two values: 0 up to saturation, the top level count past it. Equals
    /// the derivative of the clipped ReLU in `alpha`.
    TwoValued,
}

impl AlphaVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ae" => Some(AlphaVariant::Ae),
            "three_valued" => Some(AlphaVariant::ThreeValued),
            "two_valued" => Some(AlphaVariant::TwoValued),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AlphaVariant::Ae => "ae",
            AlphaVariant::ThreeValued => "three_valued",
            AlphaVariant::TwoValued => "two_valued",
        }
    }
}

/// Uniform quantizer for one activation layer.
///
/// Invariants: `alpha > 0` and `bits >= 1` hold for the lifetime of the
/// value; mutation goes through [`ActQuantizer::set_alpha`], which clamps to
/// a positive floor.
#[derive(Debug, Clone, PartialEq)]
pub struct ActQuantizer {
    bits: u32,
    alpha: f64,
    variant: AlphaVariant,
}

/// Floor applied to `alpha` after every update so it can never vanish.
pub const ALPHA_FLOOR: f64 = 1e-6;

impl ActQuantizer {
    pub fn new(bits: u32, alpha: f64, variant: AlphaVariant) -> Result<Self, ActError> {
        if bits < 1 {
            return Err(ActError::InvalidBits(bits));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(ActError::InvalidAlpha(alpha));
        }
        Ok(ActQuantizer { bits, alpha, variant })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn variant(&self) -> AlphaVariant {
        self.variant
    }

    /// Number of quantization levels including zero: `2^bits`.
    pub fn levels(&self) -> u32 {
        1u32 << self.bits
    }

    /// Index of the top level, `2^bits - 1`.
    pub fn max_level(&self) -> u32 {
        self.levels() - 1
    }

    /// Saturation threshold `(2^bits - 1) * alpha`.
    pub fn saturation(&self) -> f64 {
        self.max_level() as f64 * self.alpha
    }

    /// Replaces `alpha`, clamping to the positive floor.
    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha.max(ALPHA_FLOOR);
    }

    /// Staircase activation. Zero for `x <= 0`, `k * alpha` on the bin
    /// `((k-1) alpha, k alpha]`, and `(2^bits - 1) alpha` past saturation.
    pub fn apply(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else if x > self.saturation() {
            self.saturation()
        } else {
            // x in ((k-1) alpha, k alpha]  =>  k = ceil(x / alpha)
            let k = (x / self.alpha).ceil().min(self.max_level() as f64);
            k * self.alpha
        }
    }

    /// Clipped ReLU envelope of the staircase: identity on
    /// `(0, (2^bits - 1) alpha]`, clipped outside.
    pub fn clipped(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            x.min(self.saturation())
        }
    }

    /// Substitute derivative in `x`: the derivative of the clipped ReLU,
    /// 1 on `(0, (2^bits - 1) alpha]` and 0 outside.
    pub fn dx_proxy(&self, x: f64) -> f64 {
        if x > 0.0 && x <= self.saturation() {
            1.0
        } else {
            0.0
        }
    }

    /// Derivative in `alpha` under the selected variant.
    pub fn dalpha(&self, x: f64) -> f64 {
        let top = self.max_level() as f64;
        match self.variant {
            AlphaVariant::Ae => {
                if x <= 0.0 {
                    0.0
                } else if x > self.saturation() {
                    top
                } else {
                    (x / self.alpha).ceil().min(top)
                }
            }
            AlphaVariant::ThreeValued => {
                if x <= 0.0 {
                    0.0
                } else if x > self.saturation() {
                    top
                } else {
                    (1u32 << (self.bits - 1)) as f64
                }
            }
            AlphaVariant::TwoValued => {
                if x > self.saturation() {
                    top
                } else {
                    0.0
                }
            }
        }
    }
}
