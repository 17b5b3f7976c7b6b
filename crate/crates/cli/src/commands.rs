use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gaitgl::data::{export_dataset, load_dataset, synth_walkers, Dataset};
use gaitgl::eval::{crossview_table, distance_matrix, index_dataset, rank_k};
use gaitgl::gradsuite::run_suite;
use gaitgl::mask::{generate, Mask, MaskKind, MaskStrategy};
use gaitgl::net::GaitGl;
use gaitgl::trainer::{Checkpoint, MetricsRecord, Trainer};
use gaitgl::{Precision, Real};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{EvalArgs, GradcheckArgs, MaskDemoArgs, SynthArgs, TrainArgs};

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let ds = synth_walkers(a.ids as usize, a.seqs as usize, a.frames as usize, a.seed)?;
    export_dataset(&ds, &a.out)?;
    info!("wrote {} sequences to {}", ds.len(), a.out.display());
    Ok(())
}

fn load_split(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let root = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::Usage("no dataset configured (set dataset = <dir>)".into()))?;
    let (_, h, w) = cfg.train.backbone.input;
    Ok(load_dataset(root, (h, w))?)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.config.config.as_deref(), &a.config.set)?;
    let all = load_split(&cfg)?;
    let ds = all.filter(|r| cfg.train_seqs.contains(r.sequence));
    if ds.is_empty() {
        return Err(CliError::Usage(format!("no sequences in train_seqs = {}", cfg.train_seqs)));
    }
    cfg.write_resolved(&cfg.out)?;
    info!(
        "training on {} sequences of {} subjects, writing to {}",
        ds.len(),
        ds.num_subjects(),
        cfg.out.display()
    );
    match cfg.train.precision {
        Precision::Single => run_train::<f32>(&cfg, &ds, a.resume.as_deref()),
        Precision::Double => run_train::<f64>(&cfg, &ds, a.resume.as_deref()),
    }
}

fn run_train<F: Real>(cfg: &RunConfig, ds: &Dataset, resume: Option<&Path>) -> Result<(), CliError> {
    let classes = ds.num_subjects();
    let mut trainer: Trainer<F> = match resume {
        Some(p) => Trainer::resume(cfg.train.clone(), classes, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.train.clone(), classes)?,
    };
    let path = cfg.out.join("metrics.tsv");
    let mut log = if resume.is_some() && path.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(&path)?)
    } else {
        let mut f = BufWriter::new(File::create(&path)?);
        writeln!(f, "{}", MetricsRecord::HEADER)?;
        f
    };
    let records = trainer.run(ds, Some(&cfg.out), |r| {
        writeln!(log, "{r}")?;
        Ok(())
    });
    log.flush()?;
    let records = records?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        info!(
            "done: loss {:.4} at iteration {} -> {:.4} at iteration {}",
            first.l_c, first.iteration, last.l_c, last.iteration
        );
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.config.config.as_deref(), &a.config.set)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = load_split(&cfg)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.out.clone());
    cfg.write_resolved(&out)?;
    let text = match cfg.train.precision {
        Precision::Single => run_eval::<f32>(&cfg, &ckpt, &ds, a, &out)?,
        Precision::Double => run_eval::<f64>(&cfg, &ckpt, &ds, a, &out)?,
    };
    print!("{text}");
    Ok(())
}

fn run_eval<F: Real>(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    ds: &Dataset,
    a: &EvalArgs,
    out: &Path,
) -> Result<String, CliError> {
    // weights come from the checkpoint, the seed only fills the shapes
    let mut model: GaitGl<F> = GaitGl::new(cfg.train.backbone.clone(), None, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_params(model.params_mut())?;
    let gallery = index_dataset(&model, ds, |r| a.gallery_seqs.contains(r.sequence))?;
    let probes = index_dataset(&model, ds, |r| a.probe_seqs.contains(r.sequence))?;
    if gallery.is_empty() || probes.is_empty() {
        return Err(CliError::Usage(format!(
            "empty split: {} gallery and {} probe sequences",
            gallery.len(),
            probes.len()
        )));
    }
    let dm = distance_matrix(
        &probes.entries().iter().map(|e| &e.embedding[..]).collect::<Vec<_>>(),
        &gallery.entries().iter().map(|e| &e.embedding[..]).collect::<Vec<_>>(),
    )?;
    let rank1 = rank_k(&dm, &probes.labels(), &gallery.labels(), 1)?;
    let table = crossview_table(&probes, &gallery, !a.include_identical_view)?;
    let text = format!(
        "gallery {} sequences, probes {} sequences\nrank-1 over the whole gallery: {:.2}%\n\n{}",
        gallery.len(),
        probes.len(),
        100.0 * rank1,
        table.to_text()
    );
    fs::write(out.join("eval.txt"), &text)?;
    fs::write(out.join("eval.tsv"), table.to_tsv())?;
    Ok(text)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let results = run_suite(a.op.as_deref(), a.eps, a.tol, a.inject_fault.as_deref())?;
    let mut failed = Vec::new();
    for r in &results {
        let rep = &r.report;
        println!(
            "{:<18} {}  max rel error {:.3e} over {} coordinates ({:.1}s)",
            r.name,
            if r.passed { "ok  " } else { "FAIL" },
            rep.max_rel_error,
            rep.coordinates,
            r.elapsed.as_secs_f64()
        );
        if !r.passed {
            println!(
                "{:<18}       worst {}[{}]: analytic {:.9e} numeric {:.9e}",
                "", rep.worst_param, rep.worst_index, rep.analytic, rep.numeric
            );
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed: {}", failed.join(", "))))
    }
}

const DEMO_KINDS: [(MaskKind, &str); 5] = [
    (MaskKind::PartH, "part-h"),
    (MaskKind::PartV, "part-v"),
    (MaskKind::StripH, "strip-h"),
    (MaskKind::StripV, "strip-v"),
    (MaskKind::Pixel, "pixel"),
];

fn save_mask(m: &Mask, path: &Path) -> Result<(), CliError> {
    let img = image::GrayImage::from_raw(m.width() as u32, m.height() as u32, m.to_gray8())
        .expect("mask buffer matches extents");
    img.save(path).map_err(gaitgl::GaitError::from)?;
    Ok(())
}

pub fn mask_demo(a: &MaskDemoArgs) -> Result<(), CliError> {
    if a.height == 0 || a.width == 0 {
        return Err(CliError::Usage("mask extents must be positive".into()));
    }
    fs::create_dir_all(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut written = 0;
    for (kind, tag) in DEMO_KINDS {
        for &d in &a.ratios {
            let pair = generate(&MaskStrategy::new(kind, d)?, a.height, a.width, &mut rng);
            let stem = format!("{tag}-d{d:.2}");
            save_mask(&pair.p, &a.out.join(format!("{stem}-p.png")))?;
            save_mask(&pair.q, &a.out.join(format!("{stem}-q.png")))?;
            written += 2;
        }
    }
    info!("wrote {written} mask images to {}", a.out.display());
    Ok(())
}
