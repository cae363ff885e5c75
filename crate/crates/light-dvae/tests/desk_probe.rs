use light_dvae::data::{corpus_segments, segments_as_frames, synth_corpus};
use light_dvae::dsp::StftConfig;
use light_dvae::model::{DvaeModel, Mode, ModelConfig, Variant};
use light_dvae::pipeline::{analysis_resynthesis, TRIM_DB};
use light_dvae::training::{OptimizerConfig, RunConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn mean_sisdr(model: &DvaeModel, utts: &[light_dvae::dsp::Waveform], cfg: &StftConfig, mode: Mode, seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let vals: Vec<f64> = utts.iter().map(|w| {
        let r = analysis_resynthesis(model, cfg, w, mode, TRIM_DB, &mut rng).unwrap();
        light_dvae::metrics::si_sdr(&r.reference, &r.estimate).unwrap()
    }).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn probe_desk_scale() {
    let stft_cfg = StftConfig::new(128, 32).unwrap();
    let corpus = synth_corpus(200, 2.0, 11);
    let segs = corpus_segments(&corpus, &stft_cfg, 50, TRIM_DB).unwrap();
    let frames = segments_as_frames(&segs);
    let eval_utts = synth_corpus(10, 0.5, 999);
    println!("segments: {}", frames.len());

    let optim = OptimizerConfig { lr_max: 5e-4, warmup_iters: 200, cosine_iters: 1800, ..Default::default() };
    let run = RunConfig { seed: 11, iterations: 2000, batch_size: 8, t_seg: 50, stft: stft_cfg, ..Default::default() };

    for variant in [Variant::LigHT, Variant::InvS, Variant::InvSNR] {
        let t0 = std::time::Instant::now();
        let mcfg = ModelConfig::desk().with_variant(variant);
        let model = DvaeModel::new(mcfg, 11).unwrap();
        let mut trainer = Trainer::new(model, optim, run).unwrap();
        let rows = trainer.train(&frames, |_| {}).unwrap();
        let avg = |lo: usize, hi: usize| rows[lo..hi].iter().map(|r| r.loss.total).sum::<f64>() / (hi - lo) as f64;
        let early = avg(0, 10);
        let last = avg(rows.len() - 10, rows.len());
        let trained = trainer.model;
        let tf = mean_sisdr(&trained, &eval_utts, &stft_cfg, Mode::Tf, 77);
        let gen = mean_sisdr(&trained, &eval_utts, &stft_cfg, Mode::Gen, 77);
        println!("{variant:?}: early {early:.1} last {last:.1} decrease {:.1}%  TF {tf:.3} dB  GEN {gen:.3} dB  deg {:.3} dB  [{:.0}s]",
                 100.0 * (early - last) / early, tf - gen, t0.elapsed().as_secs_f64());
        if matches!(variant, Variant::LigHT) {
            let untrained = DvaeModel::new(mcfg, 1234).unwrap();
            let utf = mean_sisdr(&untrained, &eval_utts, &stft_cfg, Mode::Tf, 77);
            println!("  untrained TF {utf:.3} dB -> improvement {:.3} dB", tf - utf);
        }
        if matches!(variant, Variant::InvSNR) {
            // per-utterance deltas between GEN and GT
            let mut rng_a = ChaCha20Rng::seed_from_u64(55);
            let mut rng_b = ChaCha20Rng::seed_from_u64(55);
            for (i, w) in eval_utts.iter().take(3).enumerate() {
                let a = analysis_resynthesis(&trained, &stft_cfg, w, Mode::Gen, TRIM_DB, &mut rng_a).unwrap();
                let b = analysis_resynthesis(&trained, &stft_cfg, w, Mode::Tf, TRIM_DB, &mut rng_b).unwrap();
                let sa = light_dvae::metrics::si_sdr(&a.reference, &a.estimate).unwrap();
                let sb = light_dvae::metrics::si_sdr(&b.reference, &b.estimate).unwrap();
                let max_vdiff = a.est_power.values.iter().zip(b.est_power.values.iter()).map(|(x, y)| (x - y).abs() / x.abs().max(1e-12)).fold(0.0f64, f64::max);
                println!("  invsnr utt{i}: GEN {sa:.6} GT {sb:.6} delta {:.2e} dB, max v_s rel diff {max_vdiff:.2e}", (sa - sb).abs());
            }
        }
    }
}
