//! PACT activation quantization, uniform affine weight fake-quantization and
//! their straight-through backward rules.
//!
//! All rounding is half-away-from-zero (`f64::round`).

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Initial clipping level for every PACT layer.
pub const ALPHA_INIT: f32 = 10.0;
/// Lower bound enforced on α after every update.
pub const ALPHA_FLOOR: f32 = 1e-3;
/// Default coefficient of the `λ_α·α²` term.
pub const DEFAULT_LAMBDA_ALPHA: f32 = 0.0002;

/// Learnable clipping level of one PACT activation layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PactLayerState {
    pub alpha: f32,
    pub bits: u32,
    /// Last gradient applied to `alpha`, kept for logging.
    pub alpha_grad_accum: f32,
}

impl PactLayerState {
    pub fn new(bits: u32) -> Self {
        Self::with_alpha(ALPHA_INIT, bits)
    }

    pub fn with_alpha(alpha: f32, bits: u32) -> Self {
        PactLayerState {
            alpha,
            bits,
            alpha_grad_accum: 0.0,
        }
    }

    /// Number of quantization intervals, `2^k − 1`.
    pub fn intervals(&self) -> u32 {
        intervals(self.bits)
    }
}

fn intervals(bits: u32) -> u32 {
    (1u32 << bits) - 1
}

pub fn check_bits(bits: u32) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(Error::contract(format!("bit width must be in 1..=16, got {bits}")));
    }
    Ok(())
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if !(alpha > T::zero()) || !alpha.is_finite() {
        return Err(Error::contract(format!("PACT alpha must be positive and finite, got {alpha}")));
    }
    Ok(())
}

/// Region of an input relative to the clipping window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PactRegion {
    Negative,
    Interior,
    Saturated,
}

#[inline]
pub(crate) fn pact_region<T: Real>(x: T, alpha: T) -> PactRegion {
    if x < T::zero() {
        PactRegion::Negative
    } else if x < alpha {
        PactRegion::Interior
    } else {
        PactRegion::Saturated
    }
}

/// Clip to `[0, α]`, then optionally snap to the `2^k` level grid.
pub(crate) fn pact_apply<T: Real>(x: &[T], alpha: T, bits: Option<u32>, out: &mut Vec<T>) {
    out.clear();
    out.reserve(x.len());
    match bits {
        None => out.extend(x.iter().map(|&v| match pact_region(v, alpha) {
            _ if v.is_nan() => v,
            PactRegion::Negative => T::zero(),
            PactRegion::Interior => v,
            PactRegion::Saturated => alpha,
        })),
        Some(bits) => {
            let s = intervals(bits) as f64;
            let a = alpha.as_f64();
            let scale = s / a;
            out.extend(x.iter().map(|&v| {
                let y = match pact_region(v, alpha) {
                    _ if v.is_nan() => return v,
                    PactRegion::Negative => return T::zero(),
                    PactRegion::Interior => v.as_f64(),
                    PactRegion::Saturated => a,
                };
                let level = (y * scale).round();
                T::from_f64(level * a / s)
            }));
        }
    }
}

/// Quantized PACT activation: clip to `[0, α]` and round onto `2^k` levels.
pub fn pact_forward<T: Real>(x: &Tensor<T>, state: &PactLayerState) -> Result<Tensor<T>> {
    check_bits(state.bits)?;
    pact_with(x, T::from_f64(state.alpha as f64), Some(state.bits))
}

/// PACT without rounding, i.e. `clip(x, 0, α)`.
pub fn pact_clip<T: Real>(x: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
    pact_with(x, alpha, None)
}

pub(crate) fn pact_with<T: Real>(x: &Tensor<T>, alpha: T, bits: Option<u32>) -> Result<Tensor<T>> {
    check_alpha(alpha)?;
    let mut out = Vec::new();
    pact_apply(x.data(), alpha, bits, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

/// Straight-through backward of PACT. Returns `(dx, dα)`: `dx` passes the
/// upstream gradient where `0 ≤ x < α`, and `dα` collects it where `x ≥ α`.
pub fn pact_backward<T: Real>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    state: &PactLayerState,
) -> Result<(Tensor<T>, T)> {
    if upstream.shape() != x.shape() {
        return Err(Error::shape("pact_backward", upstream.shape(), x.shape()));
    }
    let alpha = T::from_f64(state.alpha as f64);
    check_alpha(alpha)?;
    let mut dx = Vec::new();
    let dalpha = pact_backward_slices(upstream.data(), x.data(), alpha, &mut dx);
    Ok((Tensor::new(x.shape().to_vec(), dx)?, dalpha))
}

pub(crate) fn pact_backward_slices<T: Real>(up: &[T], x: &[T], alpha: T, dx: &mut Vec<T>) -> T {
    dx.clear();
    dx.reserve(x.len());
    let mut dalpha = 0.0f64;
    for (&g, &v) in up.iter().zip(x) {
        match pact_region(v, alpha) {
            PactRegion::Negative => dx.push(T::zero()),
            PactRegion::Interior => dx.push(g),
            PactRegion::Saturated => {
                dx.push(T::zero());
                dalpha += g.as_f64();
            }
        }
    }
    T::from_f64(dalpha)
}

/// `α ← max(α − lr·(dα + 2·λ_α·α), ALPHA_FLOOR)`.
pub fn update_alpha(state: &PactLayerState, dalpha: f32, lr: f32, lambda_alpha: f32) -> PactLayerState {
    let a = state.alpha as f64;
    let g = dalpha as f64 + 2.0 * lambda_alpha as f64 * a;
    let next = (a - lr as f64 * g) as f32;
    PactLayerState {
        alpha: next.max(ALPHA_FLOOR),
        bits: state.bits,
        alpha_grad_accum: g as f32,
    }
}

/// Per-tensor affine quantization grid derived from a weight tensor's range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightQuantConfig {
    pub bits: u32,
    /// Level count `2^k`.
    pub levels: u32,
    /// Step size Δ; zero for a constant tensor.
    pub step: f64,
    /// Integer offset placing real zero on the grid, `round(−w_min/Δ)`.
    pub zero_point: i64,
    pub w_min: f64,
    pub w_max: f64,
}

impl WeightQuantConfig {
    /// Derives Δ and the zero point from `min(w)`/`max(w)`.
    ///
    /// Δ is truncated to `p − k` significant bits (`p` the element type's
    /// precision) so every `(q − z)·Δ` is exact in the element type; that makes
    /// re-quantizing a quantized tensor reproduce the same grid bit for bit.
    pub fn from_tensor<T: Real>(w: &Tensor<T>, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let (lo, hi) = w.min_max();
        let (w_min, w_max) = (lo.as_f64(), hi.as_f64());
        if !(w_min.is_finite() && w_max.is_finite()) {
            return Err(Error::Numerical("non-finite weight in fake quantization".into()));
        }
        let levels = 1u32 << bits;
        let mut step = 0.0;
        let mut zero_point = 0;
        if w_max > w_min {
            let raw = (w_max - w_min) / (levels - 1) as f64;
            step = truncate_significand(raw, T::MANTISSA_DIGITS - bits);
            zero_point = (-w_min / step).round() as i64;
        }
        Ok(WeightQuantConfig {
            bits,
            levels,
            step,
            zero_point,
            w_min,
            w_max,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.step == 0.0
    }

    /// Fake-quantized value of one weight.
    #[inline]
    pub fn quantize_value(&self, w: f64) -> f64 {
        let top = (self.levels - 1) as f64;
        let q = ((w / self.step).round() + self.zero_point as f64).clamp(0.0, top);
        (q - self.zero_point as f64) * self.step
    }

    /// Straight-through mask: the gradient passes iff `w_min < w < w_max`.
    #[inline]
    pub fn passes_gradient(&self, w: f64) -> bool {
        w > self.w_min && w < self.w_max
    }
}

/// Rounds a positive value toward zero so it has at most `digits` significant bits.
fn truncate_significand(v: f64, digits: u32) -> f64 {
    debug_assert!(v > 0.0 && v.is_finite());
    let exp = v.log2().floor() as i32;
    let shift = digits as i32 - 1 - exp;
    let scaled = v * 2f64.powi(shift);
    let truncated = scaled.floor() / 2f64.powi(shift);
    // log2 can be off by one right at powers of two
    if truncated > 0.0 {
        truncated
    } else {
        v
    }
}

/// Fake-quantizes `w` onto the grid described by `cfg`; constant tensors pass
/// through unchanged.
pub fn quantize_weights<T: Real>(w: &Tensor<T>, cfg: &WeightQuantConfig) -> Result<Tensor<T>> {
    if cfg.is_degenerate() {
        return Ok(w.clone());
    }
    Ok(w.map(|v| T::from_f64(cfg.quantize_value(v.as_f64()))))
}

/// Straight-through gradient of [`quantize_weights`].
pub fn quantize_weights_backward<T: Real>(
    upstream: &Tensor<T>,
    w: &Tensor<T>,
    cfg: &WeightQuantConfig,
) -> Result<Tensor<T>> {
    if upstream.shape() != w.shape() {
        return Err(Error::shape("quantize_weights_backward", upstream.shape(), w.shape()));
    }
    let data = upstream
        .data()
        .iter()
        .zip(w.data())
        .map(|(&g, &v)| if cfg.passes_gradient(v.as_f64()) { g } else { T::zero() })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}
