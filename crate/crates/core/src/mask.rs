//! Complementary occlusion masks for the local feature branch.
//!
//! A pair `(p, q)` always satisfies `p + q = 1` elementwise. `p` marks the
//! dropped region, `q` keeps the rest, so `x*p + x*q = x`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{GaitError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, v: u8) -> Self {
        Mask {
            height,
            width,
            bits: vec![v.min(1); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.bits[r * self.width + c]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    /// Rows whose every entry is 1.
    pub fn full_rows(&self) -> Vec<usize> {
        (0..self.height)
            .filter(|&r| self.bits[r * self.width..(r + 1) * self.width].iter().all(|b| *b == 1))
            .collect()
    }

    /// Columns whose every entry is 1.
    pub fn full_cols(&self) -> Vec<usize> {
        (0..self.width)
            .filter(|&c| (0..self.height).all(|r| self.get(r, c) == 1))
            .collect()
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_vec(
            &[self.height, self.width],
            self.bits.iter().map(|&b| F::of(b as f64)).collect(),
        )
        .expect("mask extents are consistent")
    }

    /// 0 -> black, 1 -> white.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b * 255).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskPair {
    pub p: Mask,
    pub q: Mask,
}

impl MaskPair {
    /// `p = 0`, `q = 1`: nothing is dropped.
    pub fn none(height: usize, width: usize) -> Self {
        MaskPair {
            p: Mask::filled(height, width, 0),
            q: Mask::filled(height, width, 1),
        }
    }

    fn from_dropped(height: usize, width: usize, dropped: impl IntoIterator<Item = usize>) -> Self {
        let mut p = Mask::filled(height, width, 0);
        for i in dropped {
            p.bits[i] = 1;
        }
        let q = p.complement();
        MaskPair { p, q }
    }

    pub fn is_complementary(&self) -> bool {
        self.p.height == self.q.height
            && self.p.width == self.q.width
            && self.p.bits.iter().zip(&self.q.bits).all(|(a, b)| a + b == 1)
    }

    pub fn is_trivial(&self) -> bool {
        self.p.bits.iter().all(|b| *b == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    PartH,
    PartV,
    StripH,
    StripV,
    Pixel,
    /// Traditional horizontal partition into `n` equal parts.
    FixedNPart(usize),
    NoMask,
}

/// Strategy and dropping ratio `d` in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStrategy {
    pub kind: MaskKind,
    pub ratio: f64,
}

impl MaskStrategy {
    pub fn new(kind: MaskKind, ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(GaitError::Config(format!("dropping ratio {ratio} not in [0, 1)")));
        }
        if let MaskKind::FixedNPart(0) = kind {
            return Err(GaitError::Config("fixed partition needs n >= 1".into()));
        }
        Ok(MaskStrategy { kind, ratio })
    }

    pub const fn no_mask() -> Self {
        MaskStrategy {
            kind: MaskKind::NoMask,
            ratio: 0.0,
        }
    }

    /// True for the random complementary strategies.
    pub fn is_random(&self) -> bool {
        matches!(
            self.kind,
            MaskKind::PartH | MaskKind::PartV | MaskKind::StripH | MaskKind::StripV | MaskKind::Pixel
        )
    }
}

/// `floor(d * n)`; the small slack absorbs representation error such as
/// `0.29 * 100 = 28.999999999999996`.
pub fn drop_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Draws a complementary pair for an `height x width` feature map.
///
/// `FixedNPart` and `NoMask` yield the trivial pair `(0, 1)`; the fixed
/// partition is realized by slicing instead (see `partition_fixed`).
pub fn generate<R: Rng + ?Sized>(s: &MaskStrategy, height: usize, width: usize, rng: &mut R) -> MaskPair {
    let (h, w) = (height, width);
    if h == 0 || w == 0 {
        return MaskPair::none(h, w);
    }
    match s.kind {
        MaskKind::PartH => {
            let n = drop_count(s.ratio, h);
            if n == 0 {
                return MaskPair::none(h, w);
            }
            let r = rng.gen_range(0..=h - n);
            MaskPair::from_dropped(h, w, (r * w)..((r + n) * w))
        }
        MaskKind::PartV => {
            let n = drop_count(s.ratio, w);
            if n == 0 {
                return MaskPair::none(h, w);
            }
            let c = rng.gen_range(0..=w - n);
            MaskPair::from_dropped(h, w, (0..h).flat_map(|r| (c..c + n).map(move |j| r * w + j)))
        }
        MaskKind::StripH => {
            let rows = index::sample(rng, h, drop_count(s.ratio, h)).into_vec();
            MaskPair::from_dropped(h, w, rows.into_iter().flat_map(|r| (r * w)..((r + 1) * w)))
        }
        MaskKind::StripV => {
            let cols = index::sample(rng, w, drop_count(s.ratio, w)).into_vec();
            MaskPair::from_dropped(h, w, cols.into_iter().flat_map(|c| (0..h).map(move |r| r * w + c)))
        }
        MaskKind::Pixel => {
            let px = index::sample(rng, h * w, drop_count(s.ratio, h * w)).into_vec();
            MaskPair::from_dropped(h, w, px)
        }
        MaskKind::FixedNPart(_) | MaskKind::NoMask => MaskPair::none(h, w),
    }
}

/// Multiplies every `(batch, channel, frame)` slice of `x` by `m`.
pub fn apply<F: Real>(x: &Tensor<F>, m: &Mask) -> Result<Tensor<F>> {
    let [_, _, _, h, w] = x.dims5("mask apply")?;
    if (h, w) != (m.height, m.width) {
        return Err(GaitError::dim(
            "mask apply",
            format!("mask is {}x{}, feature map is {h}x{w}", m.height, m.width),
        ));
    }
    let data = x
        .data()
        .chunks_exact(h * w)
        .flat_map(|s| s.iter().zip(&m.bits).map(|(&v, &b)| if b == 1 { v } else { F::zero() }))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Splits `x` along height into `n` equal parts, top to bottom.
pub fn partition_fixed<F: Real>(x: &Tensor<F>, n: usize) -> Result<Vec<Tensor<F>>> {
    let [b, c, t, h, w] = x.dims5("partition_fixed")?;
    if n == 0 || h % n != 0 {
        return Err(GaitError::dim(
            "partition_fixed",
            format!("{n} parts do not divide height {h}"),
        ));
    }
    let ph = h / n;
    (0..n)
        .map(|k| {
            let mut out = Vec::with_capacity(b * c * t * ph * w);
            for s in x.data().chunks_exact(h * w) {
                out.extend_from_slice(&s[k * ph * w..(k + 1) * ph * w]);
            }
            Tensor::from_vec(&[b, c, t, ph, w], out)
        })
        .collect()
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MaskKind::PartH => write!(f, "part-h:{}", self.ratio),
            MaskKind::PartV => write!(f, "part-v:{}", self.ratio),
            MaskKind::StripH => write!(f, "strip-h:{}", self.ratio),
            MaskKind::StripV => write!(f, "strip-v:{}", self.ratio),
            MaskKind::Pixel => write!(f, "pixel:{}", self.ratio),
            MaskKind::FixedNPart(n) => write!(f, "fixed:{n}"),
            MaskKind::NoMask => f.write_str("none"),
        }
    }
}

/// Parses `none`, `fixed:<n>` or `<kind>:<ratio>` with kind one of
/// `part-h`, `part-v`, `strip-h`, `strip-v`, `pixel`.
impl FromStr for MaskStrategy {
    type Err = GaitError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(MaskStrategy::no_mask());
        }
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| GaitError::Config(format!("mask strategy '{s}' needs '<kind>:<value>'")))?;
        if kind == "fixed" {
            let n = arg
                .parse()
                .map_err(|_| GaitError::Config(format!("bad part count in '{s}'")))?;
            return MaskStrategy::new(MaskKind::FixedNPart(n), 0.0);
        }
        let ratio: f64 = arg
            .parse()
            .map_err(|_| GaitError::Config(format!("bad dropping ratio in '{s}'")))?;
        let kind = match kind {
            "part-h" => MaskKind::PartH,
            "part-v" => MaskKind::PartV,
            "strip-h" => MaskKind::StripH,
            "strip-v" => MaskKind::StripV,
            "pixel" => MaskKind::Pixel,
            other => return Err(GaitError::Config(format!("unknown mask kind '{other}'"))),
        };
        MaskStrategy::new(kind, ratio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strat(kind: MaskKind, d: f64) -> MaskStrategy {
        MaskStrategy::new(kind, d).unwrap()
    }

    #[test]
    fn part_h_with_known_offset() {
        // find a seed that draws r = 1 out of 0..=2
        let mut chosen = None;
        for seed in 0..64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = generate(&strat(MaskKind::PartH, 0.5), 4, 2, &mut rng);
            if pair.p.full_rows() == vec![1, 2] {
                chosen = Some(pair);
                break;
            }
        }
        let pair = chosen.expect("some draw lands on r = 1");
        assert_eq!(pair.p.bits(), &[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(pair.q.bits(), &[1, 1, 0, 0, 0, 0, 1, 1]);
        assert!(pair.is_complementary());
    }

    #[test]
    fn pixel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = generate(&strat(MaskKind::Pixel, 0.25), 4, 4, &mut rng);
        assert_eq!(pair.p.count_ones(), 4);
    }

    #[test]
    fn degenerate_part_is_no_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = generate(&strat(MaskKind::PartH, 0.2), 4, 4, &mut rng);
        assert_eq!(pair, MaskPair::none(4, 4));
    }

    #[test]
    fn strip_v_counts_and_uniformity() {
        // chi-square over which columns get dropped, 1000 draws
        let (h, w, d) = (64, 44, 0.3);
        let n = drop_count(d, w);
        assert_eq!(n, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut hits = vec![0usize; w];
        for _ in 0..1000 {
            let pair = generate(&strat(MaskKind::StripV, d), h, w, &mut rng);
            let cols = pair.p.full_cols();
            assert_eq!(cols.len(), n);
            assert_eq!(pair.p.count_ones(), h * n);
            for c in cols {
                hits[c] += 1;
            }
        }
        let expected = 1000.0 * n as f64 / w as f64;
        let chi2: f64 = hits.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 43 degrees of freedom, alpha = 0.01
        assert!(chi2 < 66.62, "chi2 = {chi2}");
    }

    #[test]
    fn part_rows_are_contiguous() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let rows = generate(&strat(MaskKind::PartH, 0.37), 64, 44, &mut rng).p.full_rows();
            assert_eq!(rows.len(), drop_count(0.37, 64));
            assert!(rows.windows(2).all(|w| w[1] == w[0] + 1));
            let cols = generate(&strat(MaskKind::PartV, 0.37), 64, 44, &mut rng).p.full_cols();
            assert!(cols.windows(2).all(|w| w[1] == w[0] + 1));
        }
    }

    #[test]
    fn apply_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform(&[2, 3, 2, 4, 5], -1.0, 1.0, &mut rng);
        assert_eq!(apply(&x, &Mask::filled(4, 5, 1)).unwrap(), x);
        assert!(apply(&x, &Mask::filled(4, 5, 0)).unwrap().data().iter().all(|v| *v == 0.0));
        let pair = generate(&strat(MaskKind::Pixel, 0.4), 4, 5, &mut rng);
        let sum = apply(&x, &pair.p).unwrap().zip_map(&apply(&x, &pair.q).unwrap(), |a, b| a + b).unwrap();
        assert_eq!(sum, x);
        assert!(apply(&x, &Mask::filled(5, 4, 1)).is_err());
    }

    #[test]
    fn partition_examples() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let one = partition_fixed(&x, 1).unwrap();
        assert_eq!(one, vec![x.clone()]);
        let two = partition_fixed(&x, 2).unwrap();
        assert_eq!(two[0].data(), &[0.0, 1.0]);
        assert_eq!(two[1].data(), &[2.0, 3.0]);
        assert!(partition_fixed(&x, 3).is_err());
    }

    #[test]
    fn strategy_round_trips_through_text() {
        for s in ["none", "fixed:2", "part-h:0.25", "strip-v:0.3", "pixel:0.5"] {
            assert_eq!(s.parse::<MaskStrategy>().unwrap().to_string(), s);
        }
        assert!("pixel:1.5".parse::<MaskStrategy>().is_err());
        assert!("blob:0.1".parse::<MaskStrategy>().is_err());
    }

    proptest! {
        #[test]
        fn complementary_with_exact_counts(seed in any::<u64>(), h in 1usize..40, w in 1usize..40, d in 0.0f64..0.99, k in 0usize..5) {
            let kind = [MaskKind::PartH, MaskKind::PartV, MaskKind::StripH, MaskKind::StripV, MaskKind::Pixel][k];
            let s = strat(kind, d);
            let a = generate(&s, h, w, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = generate(&s, h, w, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&a, &b);
            prop_assert!(a.is_complementary());
            let expected = match kind {
                MaskKind::PartH | MaskKind::StripH => drop_count(d, h) * w,
                MaskKind::PartV | MaskKind::StripV => h * drop_count(d, w),
                _ => drop_count(d, h * w),
            };
            prop_assert_eq!(a.p.count_ones(), expected);
        }

        #[test]
        fn partition_concat_identity(h_parts in 1usize..5, ph in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::uniform(&[2, 2, 2, h_parts * ph, 3], -1.0, 1.0, &mut rng);
            let parts = partition_fixed(&x, h_parts).unwrap();
            let mut rebuilt = Vec::new();
            for s in 0..8 {
                for p in &parts {
                    rebuilt.extend_from_slice(&p.data()[s * ph * 3..(s + 1) * ph * 3]);
                }
            }
            prop_assert_eq!(rebuilt.as_slice(), x.data());
        }
    }
}
