// Scratch probe: convergence trajectory of the overfit configuration.
use hprn_core::data::{gen_hsi, gen_sensitivity, project_rgb, SpectralCube};
use hprn_core::metrics::mrae;
use hprn_core::model::HprnConfig;
use hprn_core::train::{Precision, TrainConfig, TrainSession};

fn main() {
    let model_cfg = HprnConfig { channels: 32, n_mrb: 2, ..Default::default() };
    let tcfg = TrainConfig {
        epochs: 20, steps_per_epoch: Some(100), batch_size: 4, patch_size: 64,
        seed: 7, precision: Precision::F32, ..Default::default()
    };
    let phi = gen_sensitivity(31, 7).unwrap();
    let mk = |seed: u64| {
        let cube = gen_hsi(64, 64, 31, seed).cast::<f32>();
        let rgb = project_rgb(&cube, &phi, None).unwrap();
        (cube, rgb)
    };
    let train: Vec<_> = (0..4).map(|i| mk(100 + i)).collect();
    let val: Vec<_> = (0..2).map(|i| mk(900 + i)).collect();
    let mut session = TrainSession::<f32>::new(model_cfg, tcfg).unwrap();
    for chunk in [100usize, 200, 400, 600] {
        let rows = session.run(&train, &val, Some(chunk)).unwrap();
        let train_mrae: f64 = train.iter().map(|(cube, rgb)| {
            let labels = session.model.cfg.label_maps(rgb).unwrap();
            let pred = session.model.forward(&rgb.to_tensor::<f32>(), &labels).unwrap();
            mrae(&SpectralCube::from_tensor(&pred).unwrap(), cube).unwrap()
        }).sum::<f64>() / 4.0;
        let val_mrae = session.validate(&val).unwrap();
        let last = rows.last().map(|r| r.total).unwrap_or(f64::NAN);
        println!("step {}: loss {:.5} train_mrae {:.4} val_mrae {:.4}", chunk, last, train_mrae, val_mrae);
    }
}
