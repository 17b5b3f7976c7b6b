use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gaitgl::autodiff::{ParamStore, Tape};
use gaitgl::kernels::ConvGeometry;
use gaitgl::mask::{generate, MaskKind, MaskStrategy};
use gaitgl::Tensor;

// Reference composition: explicit mask multiply followed by a full convolution.
fn reference(x: &Tensor<f64>, w: &Tensor<f64>, m: &Tensor<f64>, probe: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut store = ParamStore::new();
    let wid = store.add("w", w.clone()).unwrap();
    let mut t = Tape::new();
    let xv = t.input(x.clone());
    let wv = t.param(&store, wid);
    let mv = t.constant(m.clone());
    let xm = t.mul_hw(xv, mv).unwrap();
    let y = t.conv3d(xm, wv, None, ConvGeometry::same([3; 3])).unwrap();
    let pv = t.constant(probe.clone());
    let prod = t.mul(y, pv).unwrap();
    let loss = t.sum(prod);
    let yv = t.value(y).clone();
    let g = t.backward(loss, &mut store).unwrap();
    (yv, g.get(xv).unwrap().clone(), store.grad(wid).clone())
}

fn fused(x: &Tensor<f64>, w: &Tensor<f64>, m: &Tensor<f64>, probe: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut store = ParamStore::new();
    let wid = store.add("w", w.clone()).unwrap();
    let mut t = Tape::new();
    let xv = t.input(x.clone());
    let wv = t.param(&store, wid);
    let y = t.masked_conv3d(xv, wv, m, ConvGeometry::same([3; 3])).unwrap();
    let pv = t.constant(probe.clone());
    let prod = t.mul(y, pv).unwrap();
    let loss = t.sum(prod);
    let yv = t.value(y).clone();
    let g = t.backward(loss, &mut store).unwrap();
    (yv, g.get(xv).unwrap().clone(), store.grad(wid).clone())
}

#[test]
fn masked_conv_matches_multiply_then_convolve() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kinds = [MaskKind::PartH, MaskKind::StripH, MaskKind::PartV, MaskKind::Pixel];
    for (i, kind) in kinds.into_iter().cycle().take(16).enumerate() {
        let d = [0.2, 0.5, 0.7, 0.9][i % 4];
        let pair = generate(&MaskStrategy::new(kind, d).unwrap(), 9, 5, &mut rng);
        for m in [&pair.p, &pair.q] {
            let m: Tensor<f64> = m.to_tensor();
            let x = Tensor::uniform(&[2, 2, 3, 9, 5], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[3, 2, 3, 3, 3], -1.0, 1.0, &mut rng);
            let probe = Tensor::uniform(&[2, 3, 3, 9, 5], -1.0, 1.0, &mut rng);
            let (ya, dxa, dwa) = reference(&x, &w, &m, &probe);
            let (yb, dxb, dwb) = fused(&x, &w, &m, &probe);
            assert!(ya.max_abs_diff(&yb) <= 1e-12, "{kind:?} d={d}");
            assert!(dxa.max_abs_diff(&dxb) <= 1e-12, "{kind:?} d={d}");
            assert!(dwa.max_abs_diff(&dwb) <= 1e-12, "{kind:?} d={d}");
        }
    }
}

#[test]
fn masked_conv_rejects_mask_extents() {
    let mut t = Tape::<f64>::new();
    let x = t.input(Tensor::ones(&[1, 1, 3, 4, 4]));
    let w = t.input(Tensor::ones(&[1, 1, 3, 3, 3]));
    assert!(t.masked_conv3d(x, w, &Tensor::ones(&[4, 3]), ConvGeometry::same([3; 3])).is_err());
}
