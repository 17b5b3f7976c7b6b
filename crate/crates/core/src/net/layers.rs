//! Building blocks of the backbone and head, expressed as tape operations.

use crate::autodiff::{Tape, Var};
use crate::error::{GaitError, Result};
use crate::kernels::{ConvGeometry, PoolKind};
use crate::mask::MaskPair;
use crate::real::Real;

use super::config::{Activation, GlclVariant, HeadMode};

pub fn activate<F: Real>(tape: &mut Tape<F>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Leaky(slope) => tape.leaky_relu(x, slope),
        Activation::Identity => x,
    }
}

/// Local temporal aggregation: temporal kernel `a`, spatial kernel 1x1,
/// temporal stride `b`. Output length is `(T - a) / b + 1`.
pub fn lta<F: Real>(tape: &mut Tape<F>, x: Var, w: Var, a: usize, b: usize) -> Result<Var> {
    let d = tape.value(x).dims5("lta")?;
    if d[2] < a {
        return Err(GaitError::dim("lta", format!("{} frames shorter than kernel {a}", d[2])));
    }
    tape.conv3d(x, w, None, ConvGeometry::new([a, 1, 1], [b, 1, 1], [0, 0, 0]))
}

fn same_geometry(k: usize) -> ConvGeometry {
    ConvGeometry::same([k; 3])
}

/// Global feature extractor: one extent-preserving convolution plus activation.
pub fn gfr<F: Real>(tape: &mut Tape<F>, x: Var, w: Var, bias: Option<Var>, k: usize, act: Activation) -> Result<Var> {
    let y = tape.conv3d(x, w, bias, same_geometry(k))?;
    Ok(activate(tape, y, act))
}

/// Splits the height into `n` equal parts, runs the shared convolution on
/// each part separately and stacks the results back.
pub fn lfr_traditional<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    w: Var,
    k: usize,
    n: usize,
    act: Activation,
) -> Result<Var> {
    let h = tape.value(x).dims5("lfr_traditional")?[3];
    if n == 0 || h % n != 0 {
        return Err(GaitError::dim("lfr_traditional", format!("{n} parts do not divide height {h}")));
    }
    let step = h / n;
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let part = if n == 1 { x } else { tape.slice_h(x, i * step, step)? };
        let y = tape.conv3d(part, w, None, same_geometry(k))?;
        parts.push(activate(tape, y, act));
    }
    if n == 1 {
        return Ok(parts[0]);
    }
    tape.concat_h(&parts)
}

/// Mask-based local extractor: `act(conv(x * p)) + act(conv(x * q))` with a
/// single bias-free weight set. A trivial pair skips the empty branch, which
/// contributes exactly zero.
pub fn lfr_masked<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    w: Var,
    k: usize,
    pair: &MaskPair,
    act: Activation,
) -> Result<Var> {
    let d = tape.value(x).dims5("lfr_masked")?;
    if pair.p.height() != d[3] || pair.p.width() != d[4] {
        return Err(GaitError::dim(
            "lfr_masked",
            format!("mask {}x{} for feature map {}x{}", pair.p.height(), pair.p.width(), d[3], d[4]),
        ));
    }
    let branch = |tape: &mut Tape<F>, m: &crate::mask::Mask| -> Result<Var> {
        let y = tape.masked_conv3d(x, w, &m.to_tensor(), same_geometry(k))?;
        Ok(activate(tape, y, act))
    };
    if pair.is_trivial() {
        return branch(tape, &pair.q);
    }
    let a = branch(tape, &pair.p)?;
    let b = branch(tape, &pair.q)?;
    tape.add(a, b)
}

/// The three weights of one GLCL layer.
#[derive(Debug, Clone, Copy)]
pub struct GlclVars {
    pub global_w: Var,
    pub global_b: Var,
    pub local_w: Var,
}

/// How the local branch of a GLCL layer is computed.
#[derive(Debug, Clone, Copy)]
pub enum LocalBranch<'a> {
    Masked(&'a MaskPair),
    Parts(usize),
}

pub fn glcl<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    v: GlclVars,
    variant: GlclVariant,
    local: LocalBranch<'_>,
    k: usize,
    act: Activation,
) -> Result<Var> {
    let g = gfr(tape, x, v.global_w, Some(v.global_b), k, act)?;
    let l = match local {
        LocalBranch::Masked(pair) => lfr_masked(tape, x, v.local_w, k, pair, act)?,
        LocalBranch::Parts(n) => lfr_traditional(tape, x, v.local_w, k, n, act)?,
    };
    match variant {
        GlclVariant::A => tape.add(g, l),
        GlclVariant::B => tape.concat_h(&[g, l]),
    }
}

/// Max over the whole temporal axis: `[N,C,T,H,W] -> [N,C,1,H,W]`.
pub fn temporal_map<F: Real>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let t = tape.value(x).dims5("temporal_map")?[2];
    tape.pool(x, PoolKind::Max, [t, 1, 1], [t, 1, 1])
}

/// Per-strip reduction across the width: `[N,C,1,H,W] -> [N,C,H]`.
///
/// GeM expects non-negative input and reports a domain error otherwise;
/// `p` must be given for GeM.
pub fn spatial_map<F: Real>(tape: &mut Tape<F>, x: Var, mode: HeadMode, p: Option<Var>) -> Result<Var> {
    let [n, c, t, h, w] = tape.value(x).dims5("spatial_map")?;
    if t != 1 {
        return Err(GaitError::dim("spatial_map", format!("expected a single frame, got T = {t}")));
    }
    match mode {
        HeadMode::MaxAvg { alpha, beta } => {
            let mut acc = None;
            for (kind, coef) in [(PoolKind::Max, alpha), (PoolKind::Avg, beta)] {
                if coef == 0.0 {
                    continue;
                }
                let y = tape.pool(x, kind, [1, 1, w], [1, 1, w])?;
                let y = if coef == 1.0 { y } else { tape.scale(y, coef) };
                acc = Some(match acc {
                    None => y,
                    Some(a) => tape.add(a, y)?,
                });
            }
            let y = acc.ok_or_else(|| GaitError::Config("max/avg head with alpha = beta = 0".into()))?;
            tape.reshape(y, &[n, c, h])
        }
        HeadMode::Gem { .. } => {
            let p = p.ok_or_else(|| GaitError::Contract("GeM head without exponent".into()))?;
            let y = tape.gem(x, p)?;
            tape.reshape(y, &[n, c, h])
        }
    }
}

/// Separate per-strip linear maps: `x[N,C,H]` with `w[H,C,B]` gives `[N,H,B]`.
pub fn separate_fc<F: Real>(tape: &mut Tape<F>, x: Var, w: Var) -> Result<Var> {
    let xt = tape.swap_last2(x)?;
    tape.separate_fc(xt, w)
}
