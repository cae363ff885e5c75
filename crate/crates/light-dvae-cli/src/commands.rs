//! Subcommand implementations. Each writes its artifacts under the run's
//! output directory: checkpoints/, logs/, wavs/, reports/.

use std::io::Write;
use std::path::{Path, PathBuf};

use light_dvae::data::{
    build_manifest, corpus_segments, load_wav, save_wav, segments_as_frames, synth_corpus, Split,
    SplitSpec,
};
use light_dvae::error::{Error, Result};
use light_dvae::metrics::MetricReport;
use light_dvae::model::{DvaeModel, Mode};
use light_dvae::pipeline::{analysis_resynthesis, evaluate_pair, generate_waveform};
use light_dvae::training::{gradient_suite, Checkpoint, Trainer, LOG_HEADER};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::FileConfig;

fn wav_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("wav"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptySignal(format!(
                "no wav files in {}",
                path.display()
            )));
        }
        Ok(files)
    } else if path.exists() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::InvalidArgument(format!(
            "input not found: {}",
            path.display()
        )))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "utterance".into())
}

fn write_report(report: &MetricReport, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{name}.tsv")), report.to_tsv())?;
    std::fs::write(dir.join(format!("{name}.json")), report.to_json()?)?;
    Ok(())
}

pub fn train(cfg: &FileConfig, data: &Path, out: &Path) -> Result<()> {
    let model_cfg = cfg.model_config()?;
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.toml"))?;

    // Corpus: lexicographic manifest, seeded train/valid/test split.
    let manifest = build_manifest(
        data,
        &SplitSpec::Fractions {
            train: 0.9,
            valid: 0.05,
            seed: cfg.run.seed,
        },
    )?;
    manifest.save(&out.join("manifest.tsv"))?;
    let mut waves = Vec::new();
    for path in manifest.paths_for(Split::Train) {
        waves.push(load_wav(path)?);
    }
    if waves.is_empty() {
        return Err(Error::EmptySignal("train split is empty".into()));
    }
    let segments = corpus_segments(&waves, &cfg.run.stft, cfg.run.t_seg, cfg.run.trim_db)?;
    let frames = segments_as_frames(&segments);
    eprintln!(
        "training on {} segments from {} utterances ({} parameters)",
        frames.len(),
        waves.len(),
        DvaeModel::new(model_cfg, cfg.run.seed)?.count_params()
    );

    let model = DvaeModel::new(model_cfg, cfg.run.seed)?;
    let mut trainer = Trainer::new(model, cfg.optimizer, cfg.run)?;

    std::fs::create_dir_all(out.join("logs"))?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("logs/train.tsv"))?);
    writeln!(log, "{LOG_HEADER}")?;
    let ck_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ck_dir)?;
    trainer.train_with_checkpoints(
        &frames,
        |row| {
            let _ = writeln!(log, "{}", row.to_tsv());
        },
        |ck| ck.save(&ck_dir.join(format!("ckpt-{:06}.json", ck.iteration))),
    )?;
    log.flush()?;
    trainer.checkpoint().save(&ck_dir.join("ckpt-final.json"))?;
    eprintln!("done: {}", out.display());
    Ok(())
}

pub fn resynth(checkpoint: &Path, input: &Path, mode: Mode, seed: u64, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.build_model()?;
    let stft_cfg = ck.run.stft;
    let files = wav_inputs(input)?;
    let mut report = MetricReport::default();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let wav_dir = out.join("wavs");
    for path in &files {
        let wav = load_wav(path)?;
        let result = analysis_resynthesis(&model, &stft_cfg, &wav, mode, ck.run.trim_db, &mut rng)?;
        let name = stem(path);
        save_wav(&wav_dir.join(format!("{name}.resynth.wav")), &result.estimate)?;
        report.push(evaluate_pair(
            &name,
            &result.reference,
            &result.estimate,
            &stft_cfg,
        )?);
    }
    write_report(&report, &out.join("reports"), "resynth")?;
    println!("{}", report.to_tsv());
    Ok(())
}

pub fn generate(
    checkpoint: &Path,
    count: usize,
    frames: usize,
    gl_iters: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.build_model()?;
    let stft_cfg = ck.run.stft;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let wav_dir = out.join("wavs");
    for i in 0..count {
        let wav = generate_waveform(&model, &stft_cfg, frames, gl_iters, &mut rng)?;
        save_wav(&wav_dir.join(format!("gen-{i:03}.wav")), &wav)?;
    }
    eprintln!("wrote {count} files to {}", wav_dir.display());
    Ok(())
}

pub fn eval(reference: &Path, estimate: &Path, stft_window: usize, stft_hop: usize, out: &Path) -> Result<()> {
    let refs = wav_inputs(reference)?;
    let ests = wav_inputs(estimate)?;
    if refs.len() != ests.len() {
        return Err(Error::InvalidArgument(format!(
            "reference/estimate counts differ: {} vs {}",
            refs.len(),
            ests.len()
        )));
    }
    let stft_cfg = light_dvae::dsp::StftConfig::new(stft_window, stft_hop)?;
    let mut report = MetricReport::default();
    for (r, e) in refs.iter().zip(&ests) {
        report.push(evaluate_pair(
            &stem(r),
            &load_wav(r)?,
            &load_wav(e)?,
            &stft_cfg,
        )?);
    }
    write_report(&report, &out.join("reports"), "eval")?;
    println!("{}", report.to_tsv());
    Ok(())
}

pub fn synth_data(count: usize, secs: f64, seed: u64, out: &Path) -> Result<()> {
    let waves = synth_corpus(count, secs, seed);
    for (i, wav) in waves.iter().enumerate() {
        save_wav(&out.join(format!("synth-{i:05}.wav")), wav)?;
    }
    eprintln!("wrote {count} files to {}", out.display());
    Ok(())
}

pub fn params(cfg: &FileConfig, checkpoint: Option<&Path>, versus: Option<&str>) -> Result<()> {
    let model = match checkpoint {
        Some(path) => Checkpoint::load(path)?.build_model()?,
        None => {
            let mcfg = cfg.model_config()?;
            DvaeModel::new(mcfg, 0)?
        }
    };
    println!("variant: {}", model.config().variant);
    for (module, count) in model.param_breakdown() {
        println!("{module}\t{count}");
    }
    println!("total\t{}", model.count_params());
    println!("decoder-stack\t{}", model.decoder_stack_param_count());

    if let Some(other) = versus {
        let variant = other.parse()?;
        let other_cfg = model.config().with_variant(variant);
        let other_model = DvaeModel::new(other_cfg, 0)?;
        let (a, b) = (model.count_params(), other_model.count_params());
        println!("versus {variant}: total\t{b}");
        let (larger, smaller) = if a >= b { (a, b) } else { (b, a) };
        println!(
            "difference\t{}\treduction\t{:.1}%",
            larger - smaller,
            100.0 * (larger - smaller) as f64 / larger as f64
        );
    }
    Ok(())
}

pub fn gradcheck(block_eps: f64, elbo_eps: f64) -> Result<()> {
    let report = gradient_suite(block_eps, elbo_eps);
    for (name, err) in &report.blocks {
        println!("block\t{name}\t{err:.3e}");
    }
    println!("elbo\t{:.3e}", report.elbo);
    if report.worst_block() < 1e-4 && report.elbo < 1e-3 {
        println!("gradcheck: ok (blocks < 1e-4, elbo < 1e-3)");
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: worst block {:.3e}, elbo {:.3e}",
            report.worst_block(),
            report.elbo
        )))
    }
}
