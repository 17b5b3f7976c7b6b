//! Gallery/probe retrieval: distances, rank-k accuracy and the cross-view
//! accuracy table.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::data::{sequence_tensor, Condition, Dataset, SequenceRecord};
use crate::error::{GaitError, Result};
use crate::net::{EmbeddingMatrix, GaitGl};
use crate::real::Real;

/// Strips concatenated top to bottom.
pub fn flatten(e: &EmbeddingMatrix) -> Vec<f64> {
    e.values.clone()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub embedding: Vec<f64>,
    pub label: usize,
    pub view_deg: u32,
    pub condition: Condition,
}

/// Flattened embeddings with their identity, view and condition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GalleryIndex {
    entries: Vec<GalleryEntry>,
}

impl GalleryIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: GalleryEntry) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.embedding.len() != entry.embedding.len() {
                return Err(GaitError::Input(format!(
                    "embedding of length {} in an index of length {}",
                    entry.embedding.len(),
                    first.embedding.len()
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    fn vectors(&self) -> Vec<&[f64]> {
        self.entries.iter().map(|e| e.embedding.as_slice()).collect()
    }
}

/// Embeds the records of `ds` accepted by `keep` in eval mode, one whole
/// sequence at a time. Labels are subject positions in `ds`, so indexes built
/// from one dataset share a label space.
pub fn index_dataset<F: Real>(
    model: &GaitGl<F>,
    ds: &Dataset,
    keep: impl Fn(&SequenceRecord) -> bool,
) -> Result<GalleryIndex> {
    let mut index = GalleryIndex::new();
    for r in ds.records().iter().filter(|r| keep(r)) {
        let emb = model.embed_eval(&sequence_tensor::<F>(r))?;
        index.push(GalleryEntry {
            embedding: flatten(&emb[0]),
            label: ds.label_of(&r.subject_id).expect("record subject is indexed"),
            view_deg: r.view_deg,
            condition: r.condition,
        })?;
    }
    Ok(index)
}

/// Euclidean distances, probes by gallery, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Applies `f` to every entry; used to check order invariance.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DistanceMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }
}

pub fn distance_matrix<P: AsRef<[f64]>, G: AsRef<[f64]>>(probes: &[P], gallery: &[G]) -> Result<DistanceMatrix> {
    let dim = probes
        .first()
        .map(|p| p.as_ref().len())
        .or_else(|| gallery.first().map(|g| g.as_ref().len()));
    for v in probes.iter().map(AsRef::as_ref).chain(gallery.iter().map(AsRef::as_ref)) {
        if Some(v.len()) != dim {
            return Err(GaitError::Input(format!(
                "embedding of length {} among length {}",
                v.len(),
                dim.unwrap_or(0)
            )));
        }
    }
    let mut values = Vec::with_capacity(probes.len() * gallery.len());
    for p in probes {
        let p = p.as_ref();
        for g in gallery {
            let d2: f64 = p.iter().zip(g.as_ref()).map(|(a, b)| (a - b) * (a - b)).sum();
            values.push(d2.sqrt());
        }
    }
    Ok(DistanceMatrix { rows: probes.len(), cols: gallery.len(), values })
}

/// Position of the first correct match in `(distance, index)` order among
/// the allowed gallery entries, or `None` when nothing is allowed.
fn match_rank(row: &[f64], gallery_labels: &[usize], label: usize, allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let before = |a: usize, b: usize| match row[a].total_cmp(&row[b]) {
        Ordering::Less => true,
        Ordering::Equal => a < b,
        Ordering::Greater => false,
    };
    let mut any = false;
    let mut best: Option<usize> = None;
    for j in (0..row.len()).filter(|&j| allowed(j)) {
        any = true;
        if gallery_labels[j] == label && best.is_none_or(|b| before(j, b)) {
            best = Some(j);
        }
    }
    if !any {
        return None;
    }
    Some(match best {
        Some(b) => (0..row.len()).filter(|&j| allowed(j) && before(j, b)).count(),
        None => usize::MAX,
    })
}

/// Fraction of probes whose `k` nearest gallery entries contain their label.
/// Ties go to the lower gallery index.
pub fn rank_k(dm: &DistanceMatrix, probe_labels: &[usize], gallery_labels: &[usize], k: usize) -> Result<f64> {
    if dm.cols == 0 {
        return Err(GaitError::Input("empty gallery".into()));
    }
    if dm.rows == 0 {
        return Err(GaitError::Input("no probes".into()));
    }
    if k == 0 || k > dm.cols {
        return Err(GaitError::Input(format!("rank {k} outside 1..={}", dm.cols)));
    }
    if probe_labels.len() != dm.rows || gallery_labels.len() != dm.cols {
        return Err(GaitError::Input(format!(
            "{} probe and {} gallery labels for a {}x{} matrix",
            probe_labels.len(),
            gallery_labels.len(),
            dm.rows,
            dm.cols
        )));
    }
    let hits = (0..dm.rows)
        .filter(|&i| match_rank(dm.row(i), gallery_labels, probe_labels[i], |_| true).is_some_and(|r| r < k))
        .count();
    Ok(hits as f64 / dm.rows as f64)
}

/// One cell of the cross-view table. `gallery_view` is `None` for the pooled
/// cell; `accuracy` is `None` when the restricted gallery was empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub condition: Condition,
    pub probe_view: u32,
    pub gallery_view: Option<u32>,
    pub probes: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossViewTable {
    pub cells: Vec<Cell>,
    /// mean pooled accuracy over present probe views, per condition
    pub means: Vec<(Condition, f64)>,
    pub exclude_identical_view: bool,
}

impl CrossViewTable {
    pub fn pooled(&self, condition: Condition, probe_view: u32) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.condition == condition && c.probe_view == probe_view && c.gallery_view.is_none())
            .and_then(|c| c.accuracy)
    }

    pub fn mean(&self, condition: Condition) -> Option<f64> {
        self.means.iter().find(|(c, _)| *c == condition).map(|(_, m)| *m)
    }

    fn probe_views(&self) -> Vec<u32> {
        self.cells.iter().map(|c| c.probe_view).collect::<BTreeSet<_>>().into_iter().collect()
    }

    fn conditions(&self) -> Vec<Condition> {
        self.cells.iter().map(|c| c.condition).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Aligned text grid of pooled rank-1 accuracy in percent.
    pub fn to_text(&self) -> String {
        let views = self.probe_views();
        let mut out = String::new();
        let _ = write!(out, "{:<6}", "probe");
        for v in &views {
            let _ = write!(out, "{:>8}", format!("{v}\u{b0}"));
        }
        let _ = writeln!(out, "{:>8}", "mean");
        for cond in self.conditions() {
            let _ = write!(out, "{:<6}", cond.to_string());
            for v in &views {
                match self.pooled(cond, *v) {
                    Some(a) => {
                        let _ = write!(out, "{:>8.1}", 100.0 * a);
                    }
                    None => {
                        let _ = write!(out, "{:>8}", "-");
                    }
                }
            }
            match self.mean(cond) {
                Some(m) => {
                    let _ = writeln!(out, "{:>8.1}", 100.0 * m);
                }
                None => {
                    let _ = writeln!(out, "{:>8}", "-");
                }
            }
        }
        out
    }

    /// One row per cell: condition, probe view, gallery view (`all` when
    /// pooled), accuracy (`NA` when absent).
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("condition\tprobe_view\tgallery_view\taccuracy\n");
        for c in &self.cells {
            let gv = c.gallery_view.map_or_else(|| "all".to_string(), |v| v.to_string());
            let acc = c.accuracy.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(out, "{}\t{}\t{}\t{}", c.condition, c.probe_view, gv, acc);
        }
        out
    }
}

/// Rank-1 accuracy per (condition, probe view), pooled over gallery views
/// and broken down per gallery view. With `exclude_identical_view` the
/// gallery entries sharing the probe's view are left out.
pub fn crossview_table(probes: &GalleryIndex, gallery: &GalleryIndex, exclude_identical_view: bool) -> Result<CrossViewTable> {
    if gallery.is_empty() {
        return Err(GaitError::Input("empty gallery".into()));
    }
    if probes.is_empty() {
        return Err(GaitError::Input("no probes".into()));
    }
    let dm = distance_matrix(&probes.vectors(), &gallery.vectors())?;
    let glabels = gallery.labels();
    let gviews: Vec<u32> = gallery.entries.iter().map(|e| e.view_deg).collect();
    let gallery_views: BTreeSet<u32> = gviews.iter().copied().collect();
    let keys: BTreeSet<(Condition, u32)> = probes.entries.iter().map(|e| (e.condition, e.view_deg)).collect();

    let mut cells = Vec::new();
    for (cond, pview) in keys {
        let members: Vec<usize> = (0..probes.len())
            .filter(|&i| probes.entries[i].condition == cond && probes.entries[i].view_deg == pview)
            .collect();
        let cell = |gallery_view: Option<u32>| {
            let allowed = |j: usize| {
                (!exclude_identical_view || gviews[j] != pview) && gallery_view.is_none_or(|v| gviews[j] == v)
            };
            let mut hits = 0usize;
            let mut present = false;
            for &i in &members {
                if let Some(r) = match_rank(dm.row(i), &glabels, probes.entries[i].label, allowed) {
                    present = true;
                    hits += usize::from(r == 0);
                }
            }
            Cell {
                condition: cond,
                probe_view: pview,
                gallery_view,
                probes: members.len(),
                accuracy: present.then(|| hits as f64 / members.len() as f64),
            }
        };
        cells.push(cell(None));
        for &gv in &gallery_views {
            if !(exclude_identical_view && gv == pview) {
                cells.push(cell(Some(gv)));
            }
        }
    }

    let mut means = Vec::new();
    let conds: BTreeSet<Condition> = cells.iter().map(|c| c.condition).collect();
    for cond in conds {
        let accs: Vec<f64> = cells
            .iter()
            .filter(|c| c.condition == cond && c.gallery_view.is_none())
            .filter_map(|c| c.accuracy)
            .collect();
        if !accs.is_empty() {
            means.push((cond, accs.iter().sum::<f64>() / accs.len() as f64));
        }
    }
    Ok(CrossViewTable { cells, means, exclude_identical_view })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dim_distances() {
        let dm = distance_matrix(&[vec![0.0]], &[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(dm.row(0), &[3.0, 4.0]);
    }

    #[test]
    fn adversarial_rank() {
        let dm = distance_matrix(&[vec![0.0]], &[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(rank_k(&dm, &[7], &[3, 7], 1).unwrap(), 0.0);
        assert_eq!(rank_k(&dm, &[7], &[3, 7], 2).unwrap(), 1.0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let dm = distance_matrix(&[vec![0.0]], &[vec![1.0], vec![-1.0]]).unwrap();
        assert_eq!(rank_k(&dm, &[0], &[0, 1], 1).unwrap(), 1.0);
        assert_eq!(rank_k(&dm, &[1], &[0, 1], 1).unwrap(), 0.0);
    }

    #[test]
    fn bad_inputs() {
        let dm = distance_matrix(&[vec![0.0]], &[vec![1.0]]).unwrap();
        assert!(rank_k(&dm, &[0], &[0], 0).is_err());
        assert!(rank_k(&dm, &[0], &[0], 2).is_err());
        let empty: Vec<Vec<f64>> = Vec::new();
        let dm = distance_matrix(&[vec![0.0]], &empty).unwrap();
        assert!(matches!(rank_k(&dm, &[0], &[], 1), Err(GaitError::Input(_))));
        assert!(distance_matrix(&[vec![0.0]], &[vec![1.0, 2.0]]).is_err());
    }
}
