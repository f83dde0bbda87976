// scratch: per-group loss breakdown
use pcrecon_core::cloud::PointCloud;
use pcrecon_core::data::{plan_dataset, build_sample};
use pcrecon_core::tensor::Tape;
use pcrecon_core::train::{NetworkCheckpoint, Stage1Net, RunConfig};
use pcrecon_core::voxel::{stacked_forward, voxelize, GtOccupancy, PruneMode};

fn main() {
    let ck = NetworkCheckpoint::load(std::path::Path::new("/tmp/calib/s1f.ck")).unwrap();
    let cfg = ck.config.clone();
    let net = Stage1Net::from_tensors(&ck.tensors).unwrap();
    let entries = plan_dataset(&cfg.dataset_config(), cfg.seed);
    let entry = entries.iter().find(|e| e.split == pcrecon_core::data::Split::Val).unwrap();
    let (_, sample) = build_sample(entry, &cfg.dataset_config()).unwrap();
    let (grid, feats, _) = voxelize(&sample.input, cfg.l_vox).unwrap();
    let occ = GtOccupancy::build(&sample.gt, cfg.l_vox, 3);
    let mut tape = Tape::new();
    let f = tape.constant(&feats);
    let b1 = net.hg1.bind(&mut tape, false);
    let b2 = net.hg2.bind(&mut tape, false);
    let out = stacked_forward(&mut tape, &grid, f, &[&b1, &b2], 0.5, PruneMode::RescueBest).unwrap();
    let mut groups = out.mid_groups.clone();
    groups.push(out.final_group.clone());
    for (i, g) in groups.iter().enumerate() {
        let labels = occ.labels(&g.coords, g.scale);
        let pos: f64 = labels.iter().sum::<f64>() / labels.len() as f64;
        let bce = tape.bce_with_logits(g.logits, &labels);
        let v = tape.value(bce)[0];
        let logits = tape.value(g.logits);
        let acc = logits.iter().zip(&labels).filter(|(&z, &y)| (z >= 0.0) == (y == 1.0)).count() as f64 / labels.len() as f64;
        println!("group {i}: scale {} n {} pos-frac {:.3} bce {:.4} acc {:.3}", g.scale, labels.len(), pos, v, acc);
    }
    println!("v_out {} voxels; input voxels {}", out.v_out.len(), grid.len());
    let _ = PointCloud::default();
}
