use slater_core::imaging::*;
use slater_core::synthesizer::*;
use slater_core::training::*;
use slater_core::zeroshot::*;

#[test]
fn probe_grid() {
    let cfg_s = SynthesizerConfig {
        n_layers: 3, base_resolution: 4, final_resolution: 16,
        channels: vec![16; 3], k_local: 4, latent_dim: 8, kernel_size: 3,
    };
    let mut trainer = Trainer::new(cfg_s.clone(), TrainConfig {
        batch_size: 4, steps: 60, checkpoint_every: 0, seed: 1, ..TrainConfig::default()
    }).unwrap();
    let data: Vec<_> = (0..24).map(|i| make_brain_phantom(16, i)).collect();
    trainer.train(&data, |_| {}, |_, _| Ok(())).unwrap();
    let prior = Prior { synth: trainer.synth.clone(), mapper: trainer.mapper.clone() };
    for (ls, ns, ws) in [(0.3f32, 0.3f32, 0.02f32), (0.1, 0.3, 0.02), (0.1, 0.1, 0.02), (0.05, 0.1, 0.02)] {
        let mut wins = 0; let mut total = 0; let mut t0s = String::new(); let mut cold_final = 0.0;
        for seed in 0..2u64 {
            let spec = ImagingOperatorSpec::new(
                generate_vdrs_mask(16, 16, 2.0, 100 + seed).unwrap(),
                simulate_coils(16, 16, 1).unwrap(),
            ).unwrap();
            let vol = make_phantom_volume(16, 6, 700 + seed);
            let ys: Vec<_> = vol.iter().map(|m| spec.apply_forward(m).unwrap()).collect();
            let slices: Vec<_> = ys.iter().map(|y| SliceAcquisition {
                spec: spec.clone(), y: y.clone(), reference: None }).collect();
            let mk = |iters| InferenceConfig { max_iterations: iters, seed: 30 + seed,
                latent_lr_scale: ls, noise_lr_scale: ns, weights_lr_scale: ws,
                ..InferenceConfig::default() };
            let warm = reconstruct_volume(&prior, &slices, &mk(250), true).unwrap();
            let cold = reconstruct_volume(&prior, &slices, &mk(500), false).unwrap();
            let run_min = |t: &[f64]| t.iter().cloned().fold(f64::INFINITY, f64::min);
            for s in 1..6 {
                let (wmin, cmin) = (run_min(&warm[s].loss_trace), run_min(&cold[s].loss_trace));
                if wmin <= cmin { wins += 1; }
                total += 1;
                cold_final += cmin;
                t0s += &format!(" s{s}:w{:.0}/c{:.0}", warm[s].loss_trace[0], cold[s].loss_trace[0]);
            }
        }
        println!("ls {ls} ns {ns} ws {ws}: wins {wins}/{total} cold_avg {:.2} t0s{t0s}", cold_final / total as f64);
    }
    panic!("probe");
}
