use bitfed_core::bound::{BoundParams, EstimateOptions};
use bitfed_core::federation::RlEnvironment;
use bitfed_core::rl::*;

fn main() {
    let params = BoundParams::convex(1.5, 1.0, 0.05, 0.5);
    let bitwidths = vec![2u32, 3, 4, 8];
    let mut matches = 0usize;
    let mut mismatches = Vec::new();
    for seed in 0..100u64 {
        let mut env = PlantedEnv::new(
            params.clone(), GradProxy { kappa: 2.8 },
            vec![400.0, 300.0, 200.0, 100.0], 2, 32, 2.0,
        );
        let cfg = ModelBasedConfig {
            real_rounds: 20,
            bitwidths: bitwidths.clone(),
            levels: 8,
            estimate: EstimateOptions { steps: 40_000, ..EstimateOptions::convex_default(seed) },
            planning: PlanningConfig { iterations: 600, iota: 0.05, ..PlanningConfig::default() },
            seed,
        };
        let out = train_model_based(&mut env, &cfg).unwrap();
        let view = env.begin_round().unwrap();
        let sched = PolicyScheduler::new(out.theta.clone(), out.space.clone(), bitwidths.clone(), true, 0);
        let deployed = view.repair(&sched.greedy_action(env.current_loss(), &view), Some(&bitwidths)).unwrap();
        let best = enumerate_best_action(
            &params, &GradProxy { kappa: 2.8 }, env.current_loss(),
            &env.device_batch_sizes(), &bitwidths, &view, 32,
        ).unwrap();
        if deployed == best { matches += 1; }
        else if mismatches.len() < 6 {
            let b = &out.bound;
            mismatches.push((seed, out.estimate_loss, format!("L={:.3} z1={:.3} z2={:.3} B={:.3}", b.l, b.zeta1, b.zeta2, b.beps2), deployed.alpha, best.alpha));
        }
    }
    println!("matches: {matches}/100");
    for (s, el, params, da, ba) in mismatches {
        println!("  seed {s}: fit_loss {el:.3e} {params} deployed a{da} vs best a{ba}");
    }
}
