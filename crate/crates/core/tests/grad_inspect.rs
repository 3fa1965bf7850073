use hct_core::diff::Tape;
use hct_core::evalsuite::predict_all;
use hct_core::human_encoder::TrnPlan;
use hct_core::nn::Binder;
use hct_core::synthbench::{generate_dataset, BenchSpec};
use hct_core::training::{prepare_dataset, two_stage_train, ModelConfig, TrainConfig, Variant};

#[test]
#[ignore]
fn grad_inspect() {
    let spec = BenchSpec { seed: 17, shared_context_fraction: 0.5, ..BenchSpec::default() };
    let bench = generate_dataset(&spec).unwrap();
    let model_cfg = ModelConfig { variant: Variant::Full, ..ModelConfig::default() };
    let cfg = TrainConfig { seed: 17, ..TrainConfig::default() };
    let out = two_stage_train(&bench.source, &bench.target, model_cfg, &cfg).unwrap();
    let tgt_prep = prepare_dataset(&bench.target, &out.model.config).unwrap();
    let preds = predict_all(&out.model, &tgt_prep).unwrap();

    for vid in 0..3 {
        let pv = &tgt_prep[vid];
        let tape = Tape::new();
        let bd = Binder::new(&tape);
        let clips: Vec<_> = pv.clips_flat.iter().map(|c| tape.leaf(c.clone()).unwrap()).collect();
        let plan = TrnPlan::eval(out.model.config.m).unwrap();
        let bank = out.model.bank_tokens(&tape, pv.domain).unwrap();
        let logits = out.model.logits_prepared(&bd, &clips, pv, &plan, bank.as_ref()).unwrap();
        let c = preds[vid];
        let pick = {
            let mut v = vec![0.0; logits.len()];
            v[c] = 1.0;
            tape.constant(hct_core::Array::vector(v)).unwrap()
        };
        let score = tape.sum_all(&tape.mul(&logits, &pick).unwrap()).unwrap();
        let grads = tape.backward(&score).unwrap();

        let k = 2; // keyframe
        let g = grads.wrt(&clips[k]).unwrap();
        let x = &pv.clips_flat[k];
        let human_rows: Vec<usize> = (0..16)
            .filter(|&p| bench.target.videos[vid].masks[k].grid().data()[p] >= 0.5)
            .collect();
        println!("video {} class {} human rows {:?}", vid, c, human_rows);
        for p in 0..16 {
            let dot: f64 = (0..32).map(|d| g.data()[p * 32 + d] * x.data()[p * 32 + d]).sum();
            let gnorm: f64 = (0..32).map(|d| g.data()[p * 32 + d].powi(2)).sum::<f64>().sqrt();
            let xnorm: f64 = (0..32).map(|d| x.data()[p * 32 + d].powi(2)).sum::<f64>().sqrt();
            let tag = if human_rows.contains(&p) { "H" } else { "c" };
            println!("  pos {:2} {} dot {:9.4} |g| {:8.4} |x| {:6.2}", p, tag, dot, gnorm, xnorm);
        }
    }
}
