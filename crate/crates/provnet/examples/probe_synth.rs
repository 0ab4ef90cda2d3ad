use provnet::data::synthetic::make_synthetic;
use provnet::models::{ModelSpec, SharingLevel, SizePreset, Variant};
use provnet::train::{train_single_branch, Split, TrainConfig};

fn main() {
    let ds = make_synthetic(60, 4, 5);
    let spec = ModelSpec {
        variant: Variant::SingleBranch,
        conditional: false,
        size: SizePreset::Small,
        sharing_level: SharingLevel::I,
        num_classes: 4,
        index_output_size: 60,
    };
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 20,
        lr: 2e-3,
        warmup_epochs: 1,
        decay_step: 16,
        seed: 11,
        ..Default::default()
    };
    let trained = train_single_branch(&ds, None, &spec, &cfg, |r| {
        if r.split == Split::Train {
            eprintln!(
                "ep {:>2} loss {:.4} idx@1 {:.3} cfi@1 {:.3}",
                r.epoch,
                r.loss_total.unwrap_or(f32::NAN),
                r.acc_index_top1.unwrap_or(f32::NAN),
                r.class_from_index_top1.unwrap_or(f32::NAN)
            );
        }
    })
    .unwrap();
    let _ = trained;
}
