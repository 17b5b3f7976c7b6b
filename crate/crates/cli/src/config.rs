//! `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gaitgl::data::BatchSpec;
use gaitgl::mask::MaskStrategy;
use gaitgl::net::{BackboneConfig, EvalLocal, GlclVariant, HeadMode};
use gaitgl::objective::{TripletOrder, TripletReduction};
use gaitgl::trainer::{OptimizerKind, StepDecay, TrainConfig};
use gaitgl::Precision;

use crate::error::CliError;

pub const SEED_ENV: &str = "GAITGL_SEED";

/// Every accepted key with its default. Profile-dependent keys default to
/// `auto`, meaning "whatever the profile says".
const KEYS: &[(&str, &str)] = &[
    ("profile", "small"),
    ("channels", "auto"),
    ("final_glcl", "b"),
    ("frames", "auto"),
    ("height", "auto"),
    ("width", "auto"),
    ("mask", "auto"),
    ("eval_local", "none"),
    ("head", "gem"),
    ("gem_p", "6.5"),
    ("dataset", ""),
    ("out", "run"),
    ("train_seqs", "all"),
    ("seed", "0"),
    ("iterations", "500"),
    ("batch_p", "4"),
    ("batch_k", "4"),
    ("optimizer", "adam"),
    ("lr", "1e-4"),
    ("decay_every", "0"),
    ("decay_factor", "0.1"),
    ("precision", "f32"),
    ("margin", "0.2"),
    ("triplet_reduction", "mean-all"),
    ("triplet_order", "corrected"),
    ("checkpoint_every", "0"),
];

/// Inclusive range of sequence numbers, written `a-b` or `a`; `all` is the
/// unbounded range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqRange {
    pub lo: u32,
    pub hi: u32,
}

impl SeqRange {
    pub const ALL: SeqRange = SeqRange { lo: 0, hi: u32::MAX };

    pub fn contains(&self, seq: u32) -> bool {
        (self.lo..=self.hi).contains(&seq)
    }
}

impl FromStr for SeqRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(SeqRange::ALL);
        }
        let bad = || format!("bad sequence range '{s}' (expected a-b, a or all)");
        let (lo, hi) = match s.split_once('-') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let v = s.trim().parse().map_err(|_| bad())?;
                (v, v)
            }
        };
        if lo > hi {
            return Err(bad());
        }
        Ok(SeqRange { lo, hi })
    }
}

impl fmt::Display for SeqRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == SeqRange::ALL {
            f.write_str("all")
        } else {
            write!(f, "{}-{}", self.lo, self.hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub train_seqs: SeqRange,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e: T::Err| CliError::Usage(format!("{key} = '{v}': {e}")))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Resolves a configuration from an optional file and `key=value`
    /// overrides, applied in that order. `GAITGL_SEED`, when set, wins over
    /// both.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            pairs.extend(parse_pairs(&text, &path.display().to_string())?);
        }
        for o in overrides {
            pairs.extend(parse_pairs(o, "--set")?);
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            pairs.push(("seed".into(), seed));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, CliError> {
        let mut map: BTreeMap<&str, String> = KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect();
        for (k, v) in pairs {
            let Some(slot) = map.get_mut(k.as_str()) else {
                let known: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
                return Err(CliError::Usage(format!("unknown config key '{k}' (known: {})", known.join(", "))));
            };
            *slot = v.clone();
        }
        let get = |k: &str| map[k].as_str();
        let auto = |k: &str| get(k) == "auto";

        let profile = get("profile").to_string();
        let mut backbone = BackboneConfig::profile(&profile)?;
        if !auto("channels") {
            let ch = get("channels")
                .split(',')
                .map(|c| parse::<usize>("channels", c.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            backbone = backbone.with_channels(&ch)?;
        }
        backbone.set_final_variant(match get("final_glcl") {
            "a" | "A" => GlclVariant::A,
            "b" | "B" => GlclVariant::B,
            other => return Err(CliError::Usage(format!("final_glcl = '{other}': expected a or b"))),
        });
        if !auto("frames") {
            backbone.input.0 = parse("frames", get("frames"))?;
        }
        if !auto("height") {
            backbone.input.1 = parse("height", get("height"))?;
        }
        if !auto("width") {
            backbone.input.2 = parse("width", get("width"))?;
        }
        if !auto("mask") {
            backbone.mask = parse::<MaskStrategy>("mask", get("mask"))?;
        }
        backbone.eval_local = match get("eval_local") {
            "none" => EvalLocal::NoMask,
            v => match v.strip_prefix("fixed:") {
                Some(n) => EvalLocal::FixedParts(parse("eval_local", n)?),
                None => return Err(CliError::Usage(format!("eval_local = '{v}': expected none or fixed:<n>"))),
            },
        };
        backbone.head = match get("head") {
            "gem" => HeadMode::Gem { p_init: parse("gem_p", get("gem_p"))? },
            "max" => HeadMode::MaxAvg { alpha: 1.0, beta: 0.0 },
            "avg" => HeadMode::MaxAvg { alpha: 0.0, beta: 1.0 },
            "max+avg" => HeadMode::MaxAvg { alpha: 1.0, beta: 1.0 },
            v => return Err(CliError::Usage(format!("head = '{v}': expected gem, max, avg or max+avg"))),
        };

        let decay_every: u64 = parse("decay_every", get("decay_every"))?;
        let train = TrainConfig {
            profile,
            batch: BatchSpec::new(
                parse("batch_p", get("batch_p"))?,
                parse("batch_k", get("batch_k"))?,
                backbone.input.0,
            )?,
            backbone,
            iterations: parse("iterations", get("iterations"))?,
            optimizer: parse::<OptimizerKind>("optimizer", get("optimizer"))?,
            lr: parse("lr", get("lr"))?,
            decay: (decay_every > 0).then_some(StepDecay {
                every: decay_every,
                factor: parse("decay_factor", get("decay_factor"))?,
            }),
            seed: parse("seed", get("seed"))?,
            precision: parse::<Precision>("precision", get("precision"))?,
            margin: parse("margin", get("margin"))?,
            reduction: parse::<TripletReduction>("triplet_reduction", get("triplet_reduction"))?,
            order: parse::<TripletOrder>("triplet_order", get("triplet_order"))?,
            checkpoint_every: parse("checkpoint_every", get("checkpoint_every"))?,
        };
        train.validate()?;
        let dataset = Some(get("dataset")).filter(|d| !d.is_empty()).map(PathBuf::from);
        Ok(RunConfig {
            train,
            dataset,
            out: PathBuf::from(get("out")),
            train_seqs: parse("train_seqs", get("train_seqs"))?,
        })
    }

    /// Fully resolved configuration, one `key = value` per line, in the
    /// format accepted by [`RunConfig::load`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let b = &t.backbone;
        let channels: Vec<String> = b.stages.iter().map(|s| s.channels.to_string()).collect();
        let head = match b.head {
            HeadMode::Gem { .. } => "gem",
            HeadMode::MaxAvg { alpha, beta } if alpha > 0.0 && beta > 0.0 => "max+avg",
            HeadMode::MaxAvg { alpha, .. } if alpha > 0.0 => "max",
            HeadMode::MaxAvg { .. } => "avg",
        };
        let gem_p = match b.head {
            HeadMode::Gem { p_init } => p_init,
            HeadMode::MaxAvg { .. } => gaitgl::net::GEM_P_INIT,
        };
        let final_glcl = match b.final_variant() {
            Some(GlclVariant::A) => "a",
            _ => "b",
        };
        let eval_local = match b.eval_local {
            EvalLocal::NoMask => "none".to_string(),
            EvalLocal::FixedParts(n) => format!("fixed:{n}"),
        };
        let (decay_every, decay_factor) = t.decay.map_or((0, 0.1), |d| (d.every, d.factor));
        let lines: Vec<(&str, String)> = vec![
            ("profile", t.profile.clone()),
            ("channels", channels.join(",")),
            ("final_glcl", final_glcl.into()),
            ("frames", b.input.0.to_string()),
            ("height", b.input.1.to_string()),
            ("width", b.input.2.to_string()),
            ("mask", b.mask.to_string()),
            ("eval_local", eval_local),
            ("head", head.into()),
            ("gem_p", gem_p.to_string()),
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("out", self.out.display().to_string()),
            ("train_seqs", self.train_seqs.to_string()),
            ("seed", t.seed.to_string()),
            ("iterations", t.iterations.to_string()),
            ("batch_p", t.batch.p.to_string()),
            ("batch_k", t.batch.k.to_string()),
            ("optimizer", t.optimizer.to_string()),
            ("lr", t.lr.to_string()),
            ("decay_every", decay_every.to_string()),
            ("decay_factor", decay_factor.to_string()),
            ("precision", t.precision.to_string()),
            ("margin", t.margin.to_string()),
            ("triplet_reduction", t.reduction.to_string()),
            ("triplet_order", t.order.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
        ];
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Writes [`RunConfig::to_text`] to `dir/config.txt`.
    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(s: &str) -> Vec<(String, String)> {
        parse_pairs(s, "test").unwrap()
    }

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::from_pairs(&[]).unwrap();
        assert_eq!(c.train.profile, "small");
        assert_eq!(c.train.backbone.input, (30, 64, 44));
        assert_eq!(c.train_seqs, SeqRange::ALL);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_pairs(&pairs("lr = 1e-3\nlearning_rate = 1")).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn resolved_text_round_trips() {
        let c = RunConfig::from_pairs(&pairs(
            "channels = 2,4,4\nmask = strip-v:0.3\nhead = max+avg\nfinal_glcl = a\ntrain_seqs = 1-6\ndecay_every = 100\nprecision = f64",
        ))
        .unwrap();
        let again = RunConfig::from_pairs(&pairs(&c.to_text())).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_text(), again.to_text());
    }

    #[test]
    fn comments_and_blank_lines() {
        let p = pairs("# header\n\nseed = 9  # trailing\n");
        assert_eq!(p, vec![("seed".to_string(), "9".to_string())]);
        assert!(parse_pairs("seed 9", "x").is_err());
    }

    #[test]
    fn seq_ranges() {
        assert_eq!("1-6".parse::<SeqRange>().unwrap(), SeqRange { lo: 1, hi: 6 });
        assert_eq!("7".parse::<SeqRange>().unwrap(), SeqRange { lo: 7, hi: 7 });
        assert!("6-1".parse::<SeqRange>().is_err());
        assert!(SeqRange::ALL.contains(123));
    }
}
