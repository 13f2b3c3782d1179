use prune_core::harness::HarnessConfig;
use prune_core::policy::PolicyNet;
use prune_core::scene::build_scene;
use prune_core::supervisor::{draw_estimates, run_controller, ControllerId, EpisodeSpec};

#[test]
fn hybrid_trace_switches_once_and_only_on_contact() {
    let cfg = HarnessConfig::default();
    let control = cfg.control();
    let net = PolicyNet::<f32>::init(cfg.episode_setup().net_spec(), 9).unwrap();
    let threshold = control.supervisor.contact_threshold;
    let mut switched = 0;
    for seed in 0..6u64 {
        let scene = build_scene(&cfg.scene, seed).unwrap();
        let target_id = seed as usize % scene.targets.len();
        let target = scene.targets[target_id];
        let estimates = draw_estimates(&target.point, &control.supervisor, seed);
        for controller in [ControllerId::Hybrid, ControllerId::ClosedLoop] {
            let spec = EpisodeSpec {
                scene: &scene,
                target: &target,
                target_id,
                seed,
                record_trace: true,
            };
            let rec = run_controller(controller, &spec, &estimates, Some(&net), &control).unwrap();
            let trace = &rec.trace;
            assert_eq!(trace.len(), rec.steps);
            assert!(trace.windows(2).all(|w| w[1].tick == w[0].tick + 1));
            let first_interact = trace.iter().position(|r| r.phase == "interact");
            if let Some(k) = first_interact {
                switched += 1;
                assert!(k > 0 && trace[k - 1].force_filtered > threshold, "{controller:?} seed {seed}");
                assert!(trace[..k].iter().all(|r| r.phase == "approach"));
                assert!(trace[k..].iter().all(|r| r.phase == "interact" && !r.policy_query));
            }
            if controller == ControllerId::ClosedLoop {
                assert_eq!(rec.policy_queries, 0);
            }
        }
    }
    assert!(switched > 0, "no episode reached contact");
}
