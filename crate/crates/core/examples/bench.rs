use dm_core::data::io::save_dataset;
use dm_core::data::synth::{generate, SynthConfig};
use dm_core::model::{DmModel, ModelConfig};
use dm_core::train::*;
use std::time::Instant;

fn main() {
    let wall = Instant::now();
    let scfg = SynthConfig { num_videos: 50, sfx_count: 16, sigma: 0.25, split_fractions: (1.0, 0.0), ..SynthConfig::default() };
    let ds = generate(&scfg, 11).unwrap();
    let out = std::path::Path::new("/tmp/c4state");
    std::fs::create_dir_all(out).unwrap();
    save_dataset(&ds, &out.join("data")).unwrap();

    let mut model = DmModel::new(ModelConfig { seed: 4, dropout: 0.0, ..ModelConfig::default() });
    let cfg = TrainConfig { batch_size_pretrain: 48, batch_size_train: 12, pretrain_steps: 300, seed: 5, ..TrainConfig::default() };
    let videos: Vec<_> = ds.videos.iter().collect();

    let mut pd = PretrainDriver::new(&cfg, videos.len(), 300);
    for _ in 0..300 { pd.step(&mut model, &videos, &ds.sfx, &cfg).unwrap(); }
    model.save(&out.join("pretrained.dmck")).unwrap();
    println!("pretrain done ({:?})", wall.elapsed());

    let horizon = 1800usize;
    let mut td = TrainDriver::new(&cfg, videos.len(), horizon);
    for s in 0..1500 {
        td.step(&mut model, &videos, &ds.sfx, &cfg).unwrap();
        if (s + 1) % 100 == 0 && s >= 450 {
            let index = dm_core::matching::embed_sfx_index(&model, &ds.sfx, dm_core::model::ModalityMask::default()).unwrap();
            let mut all = Vec::new();
            for v in &ds.videos { all.extend(dm_core::matching::infer_with_index(&model, v, &index, dm_core::model::ModalityMask::default()).unwrap()); }
            let refs: Vec<_> = ds.videos.iter().collect();
            let m = dm_core::eval::evaluate(&all, &refs, &[0.5]).unwrap().rows[0].map_vid;
            println!("step {}: mAP_vid@0.5 {:.4} ({:?})", s + 1, m, wall.elapsed());
            if m >= 0.93 { break; }
        }
    }
    model.save(&out.join("trained.dmck")).unwrap();
    println!("saved ({:?})", wall.elapsed());
}
