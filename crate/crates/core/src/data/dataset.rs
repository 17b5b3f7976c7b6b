use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;

use crate::data::frame::{normalize_frame, FrameImage};
use crate::error::{GaitError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    /// normal walking
    Nm,
    /// carrying a bag
    Bg,
    /// wearing a coat
    Cl,
    Synth,
}

impl Condition {
    pub fn tag(self) -> &'static str {
        match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
            Condition::Synth => "synth",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag().to_uppercase())
    }
}

impl FromStr for Condition {
    type Err = GaitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nm" => Ok(Condition::Nm),
            "bg" => Ok(Condition::Bg),
            "cl" => Ok(Condition::Cl),
            "synth" => Ok(Condition::Synth),
            other => Err(GaitError::Input(format!("unknown walking condition '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SequenceRecord {
    pub subject_id: String,
    pub condition: Condition,
    /// Sequence number within the condition, 1-based (`nm-01` is 1).
    pub sequence: u32,
    pub view_deg: u32,
    pub frames: Vec<FrameImage>,
}

impl SequenceRecord {
    pub fn new(
        subject_id: impl Into<String>,
        condition: Condition,
        sequence: u32,
        view_deg: u32,
        frames: Vec<FrameImage>,
    ) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(GaitError::Input("sequence without frames".into()));
        };
        let (h, w) = (first.height, first.width);
        if frames.iter().any(|f| (f.height, f.width) != (h, w)) {
            return Err(GaitError::Input("frames of one sequence differ in size".into()));
        }
        Ok(SequenceRecord {
            subject_id: subject_id.into(),
            condition,
            sequence,
            view_deg,
            frames,
        })
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.frames[0].height, self.frames[0].width)
    }

    /// Directory name of the sequence, e.g. `nm-01`.
    pub fn seq_dir(&self) -> String {
        format!("{}-{:02}", self.condition.tag(), self.sequence)
    }
}

/// Immutable set of sequences with a subject index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<SequenceRecord>,
    index: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(records: Vec<SequenceRecord>) -> Self {
        let mut index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            index.entry(r.subject_id.clone()).or_default().push(i);
        }
        Dataset { records, index }
    }

    pub fn records(&self) -> &[SequenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Subject ids in sorted order; a subject's position is its class label.
    pub fn subjects(&self) -> Vec<&str> {
        self.index.keys().map(String::as_str).collect()
    }

    pub fn num_subjects(&self) -> usize {
        self.index.len()
    }

    pub fn records_of(&self, subject: &str) -> &[usize] {
        self.index.get(subject).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn label_of(&self, subject: &str) -> Option<usize> {
        self.index.keys().position(|s| s == subject)
    }

    pub fn filter(&self, keep: impl Fn(&SequenceRecord) -> bool) -> Dataset {
        Dataset::new(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    /// Frame extents shared by every record, if they agree.
    pub fn frame_extents(&self) -> Option<(usize, usize)> {
        let first = self.records.first()?.extents();
        self.records.iter().all(|r| r.extents() == first).then_some(first)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn parse_seq_dir(name: &str) -> Option<(Condition, u32)> {
    let (cond, seq) = name.rsplit_once('-')?;
    Some((cond.parse().ok()?, seq.parse().ok()?))
}

fn read_frame(path: &Path) -> Result<FrameImage> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    FrameImage::new(h as usize, w as usize, img.into_raw())
}

/// Loads `root/<subject>/<condition>-<seq>/<view>/<frames>`; frames are read in
/// lexicographic order and normalized to `target`. Unreadable frames and
/// empty leaves are skipped with a warning.
pub fn load_dataset(root: &Path, target: (usize, usize)) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(GaitError::NoSequences(root.to_path_buf()));
    }
    let mut records = Vec::new();
    for subject_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let subject = subject_dir.file_name().unwrap().to_string_lossy().into_owned();
        for seq_dir in sorted_entries(&subject_dir)?.into_iter().filter(|p| p.is_dir()) {
            let seq_name = seq_dir.file_name().unwrap().to_string_lossy().into_owned();
            let Some((condition, sequence)) = parse_seq_dir(&seq_name) else {
                warn!("skipping {}: expected <condition>-<number>", seq_dir.display());
                continue;
            };
            for view_dir in sorted_entries(&seq_dir)?.into_iter().filter(|p| p.is_dir()) {
                let view_name = view_dir.file_name().unwrap().to_string_lossy().into_owned();
                let Ok(view_deg) = view_name.parse::<u32>() else {
                    warn!("skipping {}: view is not a number", view_dir.display());
                    continue;
                };
                let mut frames = Vec::new();
                for file in sorted_entries(&view_dir)?.into_iter().filter(|p| p.is_file()) {
                    match read_frame(&file).and_then(|f| normalize_frame(&f, target)) {
                        Ok(f) => frames.push(f),
                        Err(e) => warn!("skipping frame {}: {e}", file.display()),
                    }
                }
                if frames.is_empty() {
                    warn!("skipping empty sequence {}", view_dir.display());
                    continue;
                }
                records.push(SequenceRecord::new(subject.clone(), condition, sequence, view_deg, frames)?);
            }
        }
    }
    if records.is_empty() {
        return Err(GaitError::NoSequences(root.to_path_buf()));
    }
    Ok(Dataset::new(records))
}

/// Writes the dataset in the layout read by [`load_dataset`], one PNG per frame.
pub fn export_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for r in ds.records() {
        let dir = root
            .join(&r.subject_id)
            .join(r.seq_dir())
            .join(format!("{:03}", r.view_deg));
        fs::create_dir_all(&dir)?;
        for (i, f) in r.frames.iter().enumerate() {
            let img = image::GrayImage::from_raw(f.width as u32, f.height as u32, f.pixels.clone())
                .expect("frame buffer matches extents");
            img.save(dir.join(format!("{i:04}.png")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: u8) -> FrameImage {
        let mut px = vec![0u8; 64 * 44];
        for r in 0..64 {
            for c in 18..26 {
                px[r * 44 + c] = v;
            }
        }
        FrameImage::new(64, 44, px).unwrap()
    }

    #[test]
    fn index_tracks_subjects() {
        let recs = vec![
            SequenceRecord::new("b", Condition::Nm, 1, 0, vec![frame(255)]).unwrap(),
            SequenceRecord::new("a", Condition::Nm, 1, 0, vec![frame(255)]).unwrap(),
            SequenceRecord::new("b", Condition::Bg, 1, 90, vec![frame(255)]).unwrap(),
        ];
        let ds = Dataset::new(recs);
        assert_eq!(ds.subjects(), vec!["a", "b"]);
        assert_eq!(ds.records_of("b"), &[0, 2]);
        assert_eq!(ds.label_of("b"), Some(1));
        assert_eq!(ds.filter(|r| r.condition == Condition::Nm).len(), 2);
    }

    #[test]
    fn record_requires_frames() {
        assert!(SequenceRecord::new("a", Condition::Nm, 1, 0, vec![]).is_err());
    }

    #[test]
    fn seq_dir_names() {
        assert_eq!(parse_seq_dir("nm-01"), Some((Condition::Nm, 1)));
        assert_eq!(parse_seq_dir("synth-12"), Some((Condition::Synth, 12)));
        assert_eq!(parse_seq_dir("xx-1"), None);
    }
}
