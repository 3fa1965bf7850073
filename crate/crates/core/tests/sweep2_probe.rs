use hct_core::evalsuite::{accuracy, attribution_map, davies_bouldin, human_ratio, predict_all, video_features_all, RatioDenominator};
use hct_core::synthbench::{generate_dataset, BenchSpec};
use hct_core::training::{prepare_dataset, two_stage_train, ModelConfig, StageConfig, TrainConfig, Variant};

fn run(spec: &BenchSpec, variant: Variant, stage2_epochs: usize) -> (f64, f64, f64, f64) {
    let bench = generate_dataset(spec).unwrap();
    let src_labels: Vec<usize> = bench.source.videos.iter().map(|v| v.label.unwrap()).collect();
    let model_cfg = ModelConfig { variant, ..ModelConfig::default() };
    let cfg = TrainConfig {
        seed: spec.seed,
        stage2: StageConfig { lr0: 0.001, weight_decay: 0.0, epochs: stage2_epochs },
        ..TrainConfig::default()
    };
    let out = two_stage_train(&bench.source, &bench.target, model_cfg, &cfg).unwrap();
    let src_prep = prepare_dataset(&bench.source, &out.model.config).unwrap();
    let tgt_prep = prepare_dataset(&bench.target, &out.model.config).unwrap();
    let src_acc = accuracy(&predict_all(&out.model, &src_prep).unwrap(), &src_labels).unwrap();
    let preds = predict_all(&out.model, &tgt_prep).unwrap();
    let tgt_acc = accuracy(&preds, &bench.target_labels).unwrap();
    let maps: Vec<_> = tgt_prep
        .iter()
        .zip(&preds)
        .map(|(pv, &c)| attribution_map(&out.model, pv, spec.h, spec.w, c, 0.5).unwrap())
        .collect();
    let masks: Vec<_> = bench.target.videos.iter().map(|v| v.masks.clone()).collect();
    let hr = human_ratio(&maps, &masks, RatioDenominator::Attribution).unwrap();
    let feats = video_features_all(&out.model, &tgt_prep).unwrap();
    let dbi = davies_bouldin(&feats, &bench.target_labels).unwrap();
    (src_acc, tgt_acc, hr.percent, dbi.index)
}

#[test]
#[ignore]
fn sweep2_probe() {
    for (h, w, camp, s2) in [
        (6usize, 6usize, 2.0f64, 30usize),
        (6, 6, 2.0, 20),
        (6, 6, 1.5, 20),
        (4, 4, 2.0, 20),
    ] {
        let spec = BenchSpec {
            seed: 17,
            h,
            w,
            shared_context_fraction: 0.5,
            human_amplitude: 3.0,
            context_amplitude: camp,
            ..BenchSpec::default()
        };
        let bb = run(&spec, Variant::Backbone, s2);
        let hm = run(&spec, Variant::HmEncOnly, s2);
        let full = run(&spec, Variant::Full, s2);
        println!(
            "{}x{} camp {:.1} s2 {:2}: BB tgt {:.3} hr {:4.1} dbi {:.2} | HM tgt {:.3} | FULL src {:.3} tgt {:.3} hr {:4.1} dbi {:.2}",
            h, w, camp, s2, bb.1, bb.2, bb.3, hm.1, full.0, full.1, full.2, full.3
        );
    }
}
