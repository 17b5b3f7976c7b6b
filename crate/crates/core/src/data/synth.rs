use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::{Condition, Dataset, SequenceRecord};
use crate::data::frame::{normalize_frame, FrameImage};
use crate::error::{GaitError, Result};

pub const SYNTH_HEIGHT: usize = 64;
pub const SYNTH_WIDTH: usize = 44;

/// View tags assigned to sequences in rotation. The view scales the apparent
/// stride from 0.75 (frontal) to 1.0 (lateral).
pub const SYNTH_VIEWS: [u32; 4] = [0, 30, 60, 90];

/// Largest grey offset added by the pixel noise; stays clear of the
/// foreground threshold so noise never changes the silhouette.
const NOISE: u8 = 40;

/// Per-identity body proportions and gait.
#[derive(Debug, Clone, Copy)]
struct Walker {
    torso_half_w: f64,
    torso_half_h: f64,
    leg_len: f64,
    period: f64,
    amplitude: f64,
}

/// Per-sequence appearance that does not belong to the identity.
#[derive(Debug, Clone, Copy)]
struct Outfit {
    head_r: f64,
    leg_half_thick: f64,
    arm_len: f64,
    /// Extra torso width and length from a coat.
    coat: f64,
    /// Bag radius and side (-1 or 1), if carried.
    bag: Option<(f64, f64)>,
    /// Upper-body lean, columns per row above the hip.
    lean: f64,
}

/// Evenly spread draw: identity `slot` of `n` gets a value from its own bin.
fn stratified<R: Rng>(rng: &mut R, slot: usize, n: usize, lo: f64, hi: f64) -> f64 {
    let u = (slot as f64 + rng.gen_range(0.15..0.85)) / n as f64;
    lo + u * (hi - lo)
}

impl Walker {
    fn draw<R: Rng>(rng: &mut R, slots: [usize; 4], n: usize) -> Self {
        Walker {
            torso_half_w: rng.gen_range(4.0..5.5),
            torso_half_h: stratified(rng, slots[0], n, 8.0, 11.0),
            leg_len: stratified(rng, slots[1], n, 18.0, 24.0),
            period: stratified(rng, slots[2], n, 10.0, 18.0),
            amplitude: stratified(rng, slots[3], n, 0.22, 0.45),
        }
    }
}

impl Outfit {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        Outfit {
            head_r: rng.gen_range(2.8..4.8),
            leg_half_thick: rng.gen_range(1.0..2.6),
            arm_len: rng.gen_range(9.0..14.0),
            coat: if rng.gen_bool(0.5) { rng.gen_range(1.5..4.0) } else { 0.0 },
            bag: rng
                .gen_bool(0.5)
                .then(|| (rng.gen_range(3.0..6.0), if rng.gen_bool(0.5) { -1.0 } else { 1.0 })),
            lean: rng.gen_range(-0.15..0.15),
        }
    }
}

/// Binary silhouette at gait phase `phi` (radians) on a 64 x 44 canvas.
fn render(wk: &Walker, of: &Outfit, phi: f64, stride_scale: f64) -> FrameImage {
    let cx = SYNTH_WIDTH as f64 / 2.0;
    let top = 2.0;
    let torso_row = top + 2.0 * of.head_r + wk.torso_half_h;
    let hip = (torso_row + 0.8 * wk.torso_half_h, cx);
    let lean = |row: f64| (row, cx + of.lean * (hip.0 - row));
    let head = lean(top + of.head_r);
    let torso_c = lean(torso_row);
    let shoulder = lean(torso_row - 0.7 * wk.torso_half_h);
    let (coat_w, coat_h) = (wk.torso_half_w + of.coat, wk.torso_half_h + 0.8 * of.coat);
    let coat_c = (torso_c.0 + 0.8 * of.coat, torso_c.1);
    let swing = wk.amplitude * stride_scale * phi.sin();
    let feet = [swing, -swing].map(|a| (hip.0 + wk.leg_len * a.cos(), hip.1 + wk.leg_len * a.sin()));
    let hands = [-0.8 * swing, 0.8 * swing].map(|a| (shoulder.0 + of.arm_len * a.cos(), shoulder.1 + of.arm_len * a.sin()));
    let bag = of.bag.map(|(r, side)| ((hip.0 - 1.0, cx + side * (coat_w + 0.5 * r)), r));

    let mut px = vec![0u8; SYNTH_HEIGHT * SYNTH_WIDTH];
    for r in 0..SYNTH_HEIGHT {
        for c in 0..SYNTH_WIDTH {
            let p = (r as f64 + 0.5, c as f64 + 0.5);
            let in_head = (p.0 - head.0).powi(2) + (p.1 - head.1).powi(2) <= of.head_r.powi(2);
            let in_torso = ((p.0 - coat_c.0) / coat_h).powi(2) + ((p.1 - coat_c.1) / coat_w).powi(2) <= 1.0;
            let in_leg = feet.iter().any(|&f| seg_dist(p, hip, f) <= of.leg_half_thick);
            let in_arm = hands.iter().any(|&h| seg_dist(p, shoulder, h) <= 1.0);
            let in_bag = bag.is_some_and(|(b, br)| (p.0 - b.0).powi(2) + (p.1 - b.1).powi(2) <= br * br);
            if in_head || in_torso || in_leg || in_arm || in_bag {
                px[r * SYNTH_WIDTH + c] = 255;
            }
        }
    }
    FrameImage {
        height: SYNTH_HEIGHT,
        width: SYNTH_WIDTH,
        pixels: px,
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Deterministic synthetic dataset of articulated walkers.
///
/// Each identity gets its own torso and leg proportions, gait period and
/// stride amplitude. Each sequence draws its own head size, limb thickness,
/// arm length, coat and bag, plus starting phase, view and pixel noise.
/// Frames are already normalized to 64 x 44, so normalizing them again is a
/// no-op.
pub fn synth_walkers(num_ids: usize, seqs_per_id: usize, frames: usize, seed: u64) -> Result<Dataset> {
    if num_ids == 0 || seqs_per_id == 0 || frames == 0 {
        return Err(GaitError::Config(format!(
            "synth_walkers needs positive counts, got ids={num_ids} seqs={seqs_per_id} frames={frames}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..4)
        .map(|_| {
            let mut p: Vec<usize> = (0..num_ids).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let walkers: Vec<Walker> = (0..num_ids)
        .map(|i| {
            let slots = [perms[0][i], perms[1][i], perms[2][i], perms[3][i]];
            Walker::draw(&mut rng, slots, num_ids)
        })
        .collect();

    let mut records = Vec::with_capacity(num_ids * seqs_per_id);
    for (i, walker) in walkers.iter().enumerate() {
        for s in 0..seqs_per_id {
            let view = SYNTH_VIEWS[s % SYNTH_VIEWS.len()];
            let stride_scale = 0.75 + 0.25 * (view as f64).to_radians().sin();
            let outfit = Outfit::draw(&mut rng);
            let phase0 = rng.gen_range(0.0..2.0 * PI);
            let mut seq = Vec::with_capacity(frames);
            for t in 0..frames {
                let phi = phase0 + 2.0 * PI * t as f64 / walker.period;
                let clean = normalize_frame(&render(walker, &outfit, phi, stride_scale), (SYNTH_HEIGHT, SYNTH_WIDTH))?;
                let noisy = clean
                    .pixels
                    .iter()
                    .map(|&v| {
                        let n = rng.gen_range(0..=NOISE);
                        if v >= 128 {
                            v - n
                        } else {
                            v + n
                        }
                    })
                    .collect();
                seq.push(FrameImage::new(SYNTH_HEIGHT, SYNTH_WIDTH, noisy)?);
            }
            records.push(SequenceRecord::new(
                format!("{:03}", i + 1),
                Condition::Synth,
                (s + 1) as u32,
                view,
                seq,
            )?);
        }
    }
    Ok(Dataset::new(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_counted() {
        let a = synth_walkers(3, 2, 5, 11).unwrap();
        let b = synth_walkers(3, 2, 5, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(a.num_subjects(), 3);
        assert_ne!(a, synth_walkers(3, 2, 5, 12).unwrap());
    }

    #[test]
    fn frames_are_normalization_fixed_points() {
        let ds = synth_walkers(4, 4, 12, 3).unwrap();
        for r in ds.records() {
            for f in &r.frames {
                assert_eq!(&normalize_frame(f, (64, 44)).unwrap(), f);
            }
        }
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(synth_walkers(0, 1, 1, 0).is_err());
    }
}
