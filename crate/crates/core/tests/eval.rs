use gaitgl::data::Condition;
use gaitgl::eval::{crossview_table, distance_matrix, flatten, rank_k, GalleryEntry, GalleryIndex};
use gaitgl::net::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn vecs(n: usize, dim: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

/// Full-sort oracle: order gallery by (distance, index) and scan the top k.
fn rank_oracle(p: &[Vec<f64>], g: &[Vec<f64>], pl: &[usize], gl: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (i, pv) in p.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = g
            .iter()
            .enumerate()
            .map(|(j, gv)| (pv.iter().zip(gv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), j))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        if order[..k].iter().any(|&(_, j)| gl[j] == pl[i]) {
            hits += 1;
        }
    }
    hits as f64 / p.len() as f64
}

#[test]
fn flatten_layout() {
    let e = EmbeddingMatrix { strips: 2, channels: 3, values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0] };
    assert_eq!(flatten(&e), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let mut other = e.clone();
    other.values[4] = 0.0;
    assert_ne!(flatten(&e), flatten(&other));
    // distance of flattened vectors = sqrt of the summed per-strip squares
    let d = distance_matrix(&[flatten(&e)], &[flatten(&other)]).unwrap().get(0, 0);
    let per_strip: f64 = (0..2)
        .map(|s| e.strip(s).iter().zip(other.strip(s)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    assert!((d - per_strip.sqrt()).abs() < 1e-15);
}

#[test]
fn distance_matrix_matches_loop() {
    let mut r = rng(1);
    let p = vecs(5, 6, &mut r);
    let g = vecs(7, 6, &mut r);
    let dm = distance_matrix(&p, &g).unwrap();
    for i in 0..5 {
        for j in 0..7 {
            let mut acc = 0.0;
            for k in 0..6 {
                acc += (p[i][k] - g[j][k]) * (p[i][k] - g[j][k]);
            }
            assert!((dm.get(i, j) - acc.sqrt()).abs() < 1e-9);
        }
    }
    let dm = distance_matrix(&p, &[p[3].clone()]).unwrap();
    assert_eq!(dm.get(3, 0), 0.0);
}

#[test]
fn self_distances_are_symmetric() {
    let x = vecs(6, 4, &mut rng(2));
    let dm = distance_matrix(&x, &x).unwrap();
    for i in 0..6 {
        assert_eq!(dm.get(i, i), 0.0);
        for j in 0..6 {
            assert_eq!(dm.get(i, j), dm.get(j, i));
        }
    }
}

#[test]
fn rank_k_matches_full_sort() {
    let mut r = rng(3);
    let p = vecs(50, 4, &mut r);
    let g = vecs(100, 4, &mut r);
    let pl: Vec<usize> = (0..50).map(|_| r.gen_range(0..10)).collect();
    let gl: Vec<usize> = (0..100).map(|_| r.gen_range(0..10)).collect();
    let dm = distance_matrix(&p, &g).unwrap();
    let mut prev = 0.0;
    for k in [1, 2, 5, 10, 100] {
        let acc = rank_k(&dm, &pl, &gl, k).unwrap();
        assert_eq!(acc, rank_oracle(&p, &g, &pl, &gl, k));
        assert!(acc >= prev);
        prev = acc;
        let warped = dm.map(|d| (3.0 * d).exp() + 1.0);
        assert_eq!(rank_k(&warped, &pl, &gl, k).unwrap(), acc);
    }
}

#[test]
fn exact_match_is_rank_one() {
    let dm = distance_matrix(&[vec![1.0, 2.0]], &[vec![5.0, 5.0], vec![1.0, 2.0]]).unwrap();
    assert_eq!(rank_k(&dm, &[4], &[9, 4], 1).unwrap(), 1.0);
}

fn entry(embedding: Vec<f64>, label: usize, view_deg: u32, condition: Condition) -> GalleryEntry {
    GalleryEntry { embedding, label, view_deg, condition }
}

#[test]
fn identical_view_twin_is_excluded() {
    let mut gallery = GalleryIndex::new();
    gallery.push(entry(vec![0.0], 0, 0, Condition::Nm)).unwrap();
    gallery.push(entry(vec![0.5], 1, 90, Condition::Nm)).unwrap();
    gallery.push(entry(vec![0.9], 0, 90, Condition::Nm)).unwrap();
    let mut probes = GalleryIndex::new();
    probes.push(entry(vec![0.0], 0, 0, Condition::Bg)).unwrap();
    let t = crossview_table(&probes, &gallery, false).unwrap();
    assert_eq!(t.pooled(Condition::Bg, 0), Some(1.0));
    let t = crossview_table(&probes, &gallery, true).unwrap();
    assert_eq!(t.pooled(Condition::Bg, 0), Some(0.0));
    assert!(t.cells.iter().all(|c| c.gallery_view != Some(0)));
}

#[test]
fn coinciding_embeddings_score_perfectly() {
    let mut gallery = GalleryIndex::new();
    let mut probes = GalleryIndex::new();
    for id in 0..4 {
        let e = vec![id as f64, (id * id) as f64];
        for view in [0, 45, 90] {
            gallery.push(entry(e.clone(), id, view, Condition::Nm)).unwrap();
            probes.push(entry(e.clone(), id, view, Condition::Cl)).unwrap();
        }
    }
    let t = crossview_table(&probes, &gallery, true).unwrap();
    assert!(t.cells.iter().all(|c| c.accuracy == Some(1.0)));
    assert_eq!(t.mean(Condition::Cl), Some(1.0));
}

#[test]
fn empty_restricted_gallery_is_absent() {
    let mut gallery = GalleryIndex::new();
    gallery.push(entry(vec![0.0], 0, 0, Condition::Nm)).unwrap();
    let mut probes = GalleryIndex::new();
    probes.push(entry(vec![0.0], 0, 0, Condition::Nm)).unwrap();
    probes.push(entry(vec![0.0], 0, 90, Condition::Nm)).unwrap();
    let t = crossview_table(&probes, &gallery, true).unwrap();
    assert_eq!(t.pooled(Condition::Nm, 0), None);
    assert_eq!(t.pooled(Condition::Nm, 90), Some(1.0));
    assert_eq!(t.mean(Condition::Nm), Some(1.0));
    assert!(t.to_tsv().contains("NM\t0\tall\tNA"));
}

#[test]
fn random_table_matches_filtered_oracle() {
    let mut r = rng(4);
    let views = [0u32, 30, 60, 90];
    let conds = [Condition::Nm, Condition::Bg];
    let mut gallery = GalleryIndex::new();
    let mut probes = GalleryIndex::new();
    for _ in 0..40 {
        let v = vecs(1, 3, &mut r).remove(0);
        gallery.push(entry(v, r.gen_range(0..6), views[r.gen_range(0..4)], Condition::Nm)).unwrap();
    }
    for _ in 0..30 {
        let v = vecs(1, 3, &mut r).remove(0);
        let c = conds[r.gen_range(0..2)];
        probes.push(entry(v, r.gen_range(0..6), views[r.gen_range(0..4)], c)).unwrap();
    }
    for exclude in [false, true] {
        let t = crossview_table(&probes, &gallery, exclude).unwrap();
        for cell in &t.cells {
            let mut hits = 0;
            let mut n = 0;
            for p in probes.entries().iter().filter(|p| p.condition == cell.condition && p.view_deg == cell.probe_view) {
                let pool: Vec<&GalleryEntry> = gallery
                    .entries()
                    .iter()
                    .filter(|g| !(exclude && g.view_deg == p.view_deg))
                    .filter(|g| cell.gallery_view.is_none_or(|v| g.view_deg == v))
                    .collect();
                if pool.is_empty() {
                    continue;
                }
                let d = |g: &GalleryEntry| g.embedding.iter().zip(&p.embedding).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = pool.iter().min_by(|a, b| d(a).partial_cmp(&d(b)).unwrap()).unwrap();
                n += 1;
                hits += usize::from(best.label == p.label);
            }
            let want = (n > 0).then(|| hits as f64 / n as f64);
            assert_eq!(cell.accuracy, want, "{cell:?}");
        }
    }
}

#[test]
fn single_view_without_exclusion_is_rank_one() {
    let mut r = rng(5);
    let g = vecs(20, 3, &mut r);
    let p = vecs(15, 3, &mut r);
    let gl: Vec<usize> = (0..20).map(|i| i % 5).collect();
    let pl: Vec<usize> = (0..15).map(|i| i % 5).collect();
    let mut gallery = GalleryIndex::new();
    for (v, l) in g.iter().zip(&gl) {
        gallery.push(entry(v.clone(), *l, 0, Condition::Nm)).unwrap();
    }
    let mut probes = GalleryIndex::new();
    for (v, l) in p.iter().zip(&pl) {
        probes.push(entry(v.clone(), *l, 0, Condition::Nm)).unwrap();
    }
    let t = crossview_table(&probes, &gallery, false).unwrap();
    let dm = distance_matrix(&p, &g).unwrap();
    assert_eq!(t.pooled(Condition::Nm, 0), Some(rank_k(&dm, &pl, &gl, 1).unwrap()));
}

#[test]
fn mismatched_dimension_rejected() {
    let mut idx = GalleryIndex::new();
    idx.push(entry(vec![0.0, 1.0], 0, 0, Condition::Nm)).unwrap();
    assert!(idx.push(entry(vec![0.0], 0, 0, Condition::Nm)).is_err());
}

#[test]
fn text_table_lists_views_and_mean() {
    let mut gallery = GalleryIndex::new();
    let mut probes = GalleryIndex::new();
    gallery.push(entry(vec![0.0], 0, 0, Condition::Nm)).unwrap();
    gallery.push(entry(vec![1.0], 1, 90, Condition::Nm)).unwrap();
    probes.push(entry(vec![0.1], 0, 90, Condition::Nm)).unwrap();
    probes.push(entry(vec![0.9], 1, 0, Condition::Nm)).unwrap();
    let t = crossview_table(&probes, &gallery, true).unwrap();
    let text = t.to_text();
    assert!(text.lines().next().unwrap().contains("90\u{b0}"));
    assert!(text.contains("NM"));
    assert!(text.lines().nth(1).unwrap().trim_end().ends_with("0.0"));
}
