//! Scratch probe for hyperparameter behavior across pipeline arms.

use debias_core::datagen::group_partition;
use debias_core::evalkit::aggregate;
use debias_core::pipeline::{load_bundle, run_seeds, PipelineArm, RunConfig};
use debias_core::scorer::Scorer;
use debias_core::training::{
    expert_true_class_confidence, train_auxiliary, train_bias_experts,
};

fn expert_diagnostics(config: &RunConfig) {
    let bundle = load_bundle(config).unwrap();
    let ds = &bundle.train;
    let plan = config.plan(config.seed);
    let expert_plan = debias_core::training::TrainPlan {
        stop: match config.expert_max_steps {
            Some(t) => debias_core::training::StopRule::MaxSteps(t),
            None => plan.stop,
        },
        ..plan.clone()
    };
    let aux = train_auxiliary(ds, &plan).unwrap();
    let experts = train_bias_experts(ds, &aux.q, &expert_plan).unwrap();
    let mc = debias_core::training::train_multiclass_auxiliary_ensemble(ds, &expert_plan, ds.k())
        .unwrap();
    let parts = group_partition(ds).unwrap();

    let sc = |s: &dyn Scorer, idxs: &Vec<usize>| {
        debias_core::training::scorer_true_class_confidence(s, ds, idxs).unwrap()
    };
    println!(
        "merged expert p_b[y]: biased {:.3} conflicting {:.3} | mc-ensemble: biased {:.3} conflicting {:.3}",
        sc(&experts.ensemble, &parts.biased),
        sc(&experts.ensemble, &parts.bias_conflicting),
        sc(&mc, &parts.biased),
        sc(&mc, &parts.bias_conflicting),
    );

    let qb: f64 = parts.biased.iter().map(|&i| aux.q.values()[i]).sum::<f64>()
        / parts.biased.len() as f64;
    let qc: f64 = parts
        .bias_conflicting
        .iter()
        .map(|&i| aux.q.values()[i])
        .sum::<f64>()
        / parts.bias_conflicting.len() as f64;
    println!("aux q: biased {qb:.3}  conflicting {qc:.3}");

    let eb = expert_true_class_confidence(&experts.ensemble, ds, &parts.biased).unwrap();
    let ec =
        expert_true_class_confidence(&experts.ensemble, ds, &parts.bias_conflicting).unwrap();
    println!("expert sigma(f_y): biased {eb:.3}  conflicting {ec:.3}");

    // How often does the merged p_b put its argmax on the true label, per group?
    let hit = |idxs: &Vec<usize>| -> (f64, f64) {
        let mut top_true = 0usize;
        let mut mass_true = 0.0;
        for &i in idxs {
            let ex = &ds.examples()[i];
            let p = experts.ensemble.class_probs(&ex.features).unwrap();
            let am = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            top_true += usize::from(am == ex.label);
            mass_true += p[ex.label];
        }
        (
            100.0 * top_true as f64 / idxs.len() as f64,
            mass_true / idxs.len() as f64,
        )
    };
    let (tb, mb) = hit(&parts.biased);
    let (tc, mc) = hit(&parts.bias_conflicting);
    println!("merged p_b on biased: argmax=true {tb:.1}%  p_b[y] {mb:.3}");
    println!("merged p_b on conflicting: argmax=true {tc:.1}%  p_b[y] {mc:.3}");
}

fn main() {
    let mut config = RunConfig::default();
    let args: Vec<String> = std::env::args().collect();
    // args: [lr] [alpha] [n_seeds] [n_train] [main_hidden] [expert_T]
    if args.len() > 1 {
        config.learning_rate = args[1].parse().unwrap();
    }
    if args.len() > 2 {
        config.alpha = args[2].parse().unwrap();
    }
    if args.len() > 3 {
        config.n_seeds = args[3].parse().unwrap();
    }
    if args.len() > 4 {
        if let debias_core::pipeline::DatasetSource::Synthetic { spec } = &mut config.dataset {
            spec.n_train = args[4].parse().unwrap();
        }
    }
    if args.len() > 5 {
        config.main_hidden = vec![args[5].parse().unwrap()];
    }
    if args.len() > 6 {
        config.expert_max_steps = Some(args[6].parse().unwrap());
    }
    if args.len() > 7 {
        let w: usize = args[7].parse().unwrap();
        config.aux_hidden = vec![w];
        config.expert_hidden = vec![w];
    }
    config.validate().unwrap();
    expert_diagnostics(&config);
    let bundle = load_bundle(&config).unwrap();

    println!(
        "lr={} alpha={} seeds={} aux={:?} expert={:?} main={:?}",
        config.learning_rate,
        config.alpha,
        config.n_seeds,
        config.aux_hidden,
        config.expert_hidden,
        config.main_hidden
    );
    println!(
        "{:<8} {:>8} {:>8} {:>8} {:>10} {:>12} {:>8}",
        "arm", "acc_tr", "acc_id", "acc_ood", "ood_biased", "ood_conflict", "gap"
    );
    for arm in [
        PipelineArm::Full,
        PipelineArm::WithoutAmp,
        PipelineArm::WithoutOvr,
        PipelineArm::WithoutBoth,
        PipelineArm::Erm,
    ] {
        let start = std::time::Instant::now();
        let reports = run_seeds(&config, &bundle, arm).unwrap();
        let agg = aggregate(&reports).unwrap();
        let g = |k: &str| agg.metrics.get(k).map(|m| m.mean).unwrap_or(f64::NAN);
        let per_seed: Vec<String> = reports
            .iter()
            .map(|r| {
                format!(
                    "{:.1}",
                    r.groups
                        .ood_test
                        .bias_conflicting
                        .as_ref()
                        .map(|s| s.accuracy)
                        .unwrap_or(f64::NAN)
                )
            })
            .collect();
        println!(
            "{:<8} {:>8.2} {:>8.2} {:>8.2} {:>10.2} {:>12.2} {:>8.2}   ({:.1}s) [{}]",
            arm.tag(),
            g("acc_train"),
            g("acc_id"),
            g("acc_ood"),
            g("acc_ood_biased"),
            g("acc_ood_conflicting"),
            g("gap"),
            start.elapsed().as_secs_f64(),
            per_seed.join(" "),
        );
    }
}
