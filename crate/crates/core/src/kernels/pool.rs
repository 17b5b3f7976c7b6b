use crate::error::{GaitError, Result};
use crate::kernels::window_len;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

pub struct PoolOutput<F> {
    pub value: Tensor<F>,
    /// Flat input index of each window's maximum (max pooling only).
    pub argmax: Option<Vec<usize>>,
}

/// Windowed max / mean over (T, H, W) of a rank-5 tensor, no padding.
/// Ties in max pooling resolve to the first element in window order.
pub fn pool<F: Real>(
    x: &Tensor<F>,
    kind: PoolKind,
    kernel: [usize; 3],
    stride: [usize; 3],
) -> Result<PoolOutput<F>> {
    let [n, c, t, h, w] = x.dims5("pool")?;
    let out = match (
        window_len(t, kernel[0], stride[0], 0),
        window_len(h, kernel[1], stride[1], 0),
        window_len(w, kernel[2], stride[2], 0),
    ) {
        (Some(a), Some(b), Some(d)) => [a, b, d],
        _ => {
            return Err(GaitError::dim(
                "pool",
                format!(
                    "kernel {kernel:?} with stride {stride:?} does not fit input {:?}",
                    x.shape()
                ),
            ))
        }
    };
    let [to, ho, wo] = out;
    let xd = x.data();
    let count = F::of((kernel[0] * kernel[1] * kernel[2]) as f64);
    let mut vals = Vec::with_capacity(n * c * to * ho * wo);
    let mut arg = (kind == PoolKind::Max).then(|| Vec::with_capacity(vals.capacity()));
    for nc in 0..n * c {
        let base = nc * t * h * w;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut best_i = 0;
                    let mut acc = F::zero();
                    for a in 0..kernel[0] {
                        for b in 0..kernel[1] {
                            let row = base + ((ot * stride[0] + a) * h + oh * stride[1] + b) * w;
                            for d in 0..kernel[2] {
                                let i = row + ow * stride[2] + d;
                                let v = xd[i];
                                match kind {
                                    PoolKind::Max => {
                                        if v > best {
                                            best = v;
                                            best_i = i;
                                        }
                                    }
                                    PoolKind::Avg => acc = acc + v,
                                }
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            vals.push(best);
                            if let Some(a) = arg.as_mut() {
                                a.push(best_i);
                            }
                        }
                        PoolKind::Avg => vals.push(acc / count),
                    }
                }
            }
        }
    }
    Ok(PoolOutput {
        value: Tensor::from_vec(&[n, c, to, ho, wo], vals)?,
        argmax: arg,
    })
}

pub fn pool_backward<F: Real>(
    input_shape: &[usize],
    kind: PoolKind,
    kernel: [usize; 3],
    stride: [usize; 3],
    argmax: Option<&[usize]>,
    dy: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut dx = vec![F::zero(); input_shape.iter().product()];
    match kind {
        PoolKind::Max => {
            let arg = argmax.ok_or_else(|| {
                GaitError::Contract("max-pool backward without saved argmax".into())
            })?;
            for (&i, &g) in arg.iter().zip(dy.data()) {
                dx[i] = dx[i] + g;
            }
        }
        PoolKind::Avg => {
            let [_, _, t, h, w] = [
                input_shape[0],
                input_shape[1],
                input_shape[2],
                input_shape[3],
                input_shape[4],
            ];
            let [_, _, to, ho, wo] = [dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3], dy.shape()[4]];
            let inv = F::one() / F::of((kernel[0] * kernel[1] * kernel[2]) as f64);
            let nc = input_shape[0] * input_shape[1];
            let g = dy.data();
            let mut gi = 0;
            for p in 0..nc {
                let base = p * t * h * w;
                for ot in 0..to {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let v = g[gi] * inv;
                            gi += 1;
                            for a in 0..kernel[0] {
                                for b in 0..kernel[1] {
                                    let row = base + ((ot * stride[0] + a) * h + oh * stride[1] + b) * w;
                                    for d in 0..kernel[2] {
                                        let i = row + ow * stride[2] + d;
                                        dx[i] = dx[i] + v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(input_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_and_max_along_width() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let avg = pool(&x, PoolKind::Avg, [1, 1, 4], [1, 1, 1]).unwrap();
        assert_eq!(avg.value.data(), &[2.5]);
        let max = pool(&x, PoolKind::Max, [1, 1, 4], [1, 1, 1]).unwrap();
        assert_eq!(max.value.data(), &[4.0]);
    }

    #[test]
    fn max_2x2_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[1, 2, 6, 4, 4], -1.0, 1.0, &mut rng);
        let y = pool(&x, PoolKind::Max, [1, 2, 2], [1, 2, 2]).unwrap().value;
        assert_eq!(y.shape(), &[1, 2, 6, 2, 2]);
        for c in 0..2 {
            for t in 0..6 {
                for i in 0..2 {
                    for j in 0..2 {
                        let mut m = f64::NEG_INFINITY;
                        for a in 0..2 {
                            for b in 0..2 {
                                m = m.max(x.at(&[0, c, t, 2 * i + a, 2 * j + b]));
                            }
                        }
                        assert_eq!(y.at(&[0, c, t, i, j]), m);
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        assert!(pool(&x, PoolKind::Avg, [3, 1, 1], [1, 1, 1]).is_err());
    }
}
