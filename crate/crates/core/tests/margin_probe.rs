use std::time::Instant;

use hct_core::evalsuite::{accuracy, attribution_map, davies_bouldin, human_ratio, predict_all, video_features_all, RatioDenominator};
use hct_core::synthbench::{generate_dataset, BenchSpec, Domain};
use hct_core::training::{prepare_dataset, two_stage_train, ModelConfig, TrainConfig, Variant};

#[test]
#[ignore]
fn margin_probe() {
    for seed in [17u64, 18, 19] {
        let spec = BenchSpec { seed, ..BenchSpec::default() };
        let bench = generate_dataset(&spec).unwrap();
        let src_labels: Vec<usize> = bench.source.videos.iter().map(|v| v.label.unwrap()).collect();
        for variant in [Variant::Backbone, Variant::HmEncOnly, Variant::Full] {
            let t = Instant::now();
            let model_cfg = ModelConfig { variant, ..ModelConfig::default() };
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let out = two_stage_train(&bench.source, &bench.target, model_cfg, &cfg).unwrap();
            let src_prep = prepare_dataset(&bench.source, &out.model.config).unwrap();
            let tgt_prep = prepare_dataset(&bench.target, &out.model.config).unwrap();
            let src_acc = accuracy(&predict_all(&out.model, &src_prep).unwrap(), &src_labels).unwrap();
            let tgt_acc = accuracy(&predict_all(&out.model, &tgt_prep).unwrap(), &bench.target_labels).unwrap();
            // human ratio on target, attribution of the predicted class
            let preds = predict_all(&out.model, &tgt_prep).unwrap();
            let maps: Vec<_> = tgt_prep
                .iter()
                .zip(&preds)
                .map(|(pv, &c)| attribution_map(&out.model, pv, spec.h, spec.w, c, 0.5).unwrap())
                .collect();
            let masks: Vec<_> = bench.target.videos.iter().map(|v| v.masks.clone()).collect();
            let hr = human_ratio(&maps, &masks, RatioDenominator::Attribution).unwrap();
            let feats = video_features_all(&out.model, &tgt_prep).unwrap();
            let dbi = davies_bouldin(&feats, &bench.target_labels).unwrap();
            println!(
                "seed {} {:?}: src {:.3} tgt {:.3} hr {:.1}% (skip {}) dbi {:.3} [{:.1?}]",
                seed, variant, src_acc, tgt_acc, hr.percent, hr.skipped, dbi.index, t.elapsed()
            );
        }
    }
}
