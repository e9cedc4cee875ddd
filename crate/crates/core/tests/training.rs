use weightscope::coordinate::PackagingMode;
use weightscope::emitter::EmitterKind;
use weightscope::harness::dataset::{ingest, Dataset, DatasetSpec};
use weightscope::trainer::{
    self, accuracy, embed_all, fresh_reader_train, frozen_fits, load_checkpoint, save_checkpoint, FreshReaderConfig, RunRecord, TrainConfig,
};

fn data() -> Dataset {
    ingest(&DatasetSpec::synthetic_desk(16, 8, 3)).unwrap()
}

fn config(kind: EmitterKind) -> TrainConfig {
    let mut c = TrainConfig::desk(kind);
    c.epochs = 2;
    c
}

fn losses(r: &RunRecord) -> Vec<(u64, u64)> {
    r.steps.iter().map(|s| (s.loss.total.to_bits(), s.loss.cls.to_bits())).collect()
}

#[test]
fn logged_loss_parts_sum_to_the_optimized_scalar() {
    let d = data();
    for kind in [EmitterKind::Anchor, EmitterKind::Center, EmitterKind::Contrast] {
        let out = trainer::train(&config(kind), &d, None).unwrap();
        assert!(!out.record.steps.is_empty());
        for s in &out.record.steps {
            assert!(s.weighted_sum_error <= 1e-10, "{}: {}", kind.name(), s.weighted_sum_error);
        }
        let best = out.record.best_val_top1.unwrap();
        assert!(out.record.epochs.iter().all(|e| e.val_top1 <= best));
    }
}

#[test]
fn zero_aux_weight_reduces_to_the_anchor_run() {
    let d = data();
    let anchor = trainer::train(&config(EmitterKind::Anchor), &d, None).unwrap();
    for kind in [EmitterKind::Center, EmitterKind::Contrast] {
        let mut c = config(kind);
        c.emitter.aux_weight = 0.0;
        let other = trainer::train(&c, &d, None).unwrap();
        assert_eq!(losses(&other.record), losses(&anchor.record), "{}", kind.name());
        assert_eq!(other.last.anchor, anchor.last.anchor);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let d = data();
    let a = trainer::train(&config(EmitterKind::Anchor), &d, None).unwrap();
    let b = trainer::train(&config(EmitterKind::Anchor), &d, None).unwrap();
    assert_eq!(a.record, b.record);
    assert_eq!(a.last, b.last);
}

#[test]
fn checkpoints_restore_identical_predictions() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let out = trainer::train(&config(EmitterKind::BiasRoute), &d, Some(dir.path())).unwrap();
    let best = out.best.unwrap();
    let path = dir.path().join("copy.ckpt");
    save_checkpoint(&path, &best).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, best);
    let tokens = |m| embed_all(m, &d.val, 0, "val").unwrap().into_iter().map(|e| e.tokens).collect::<Vec<_>>();
    let (ta, tb) = (tokens(&best), tokens(&back));
    assert_eq!(ta, tb);
    let labels = d.val_labels();
    assert_eq!(accuracy(&best.reader, &ta, &labels).unwrap(), accuracy(&back.reader, &tb, &labels).unwrap());
    let saved = load_checkpoint(out.record.checkpoints.last().unwrap()).unwrap();
    assert_eq!(saved, best);
}

#[test]
fn truncated_checkpoint_is_an_error() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let out = trainer::train(&config(EmitterKind::Anchor), &d, None).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &out.last).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn fresh_readers_never_move_the_emitter() {
    let d = data();
    let emitter = trainer::train(&config(EmitterKind::Anchor), &d, None).unwrap().last;
    let mut cfg = FreshReaderConfig::desk(PackagingMode::ResidualOnly);
    cfg.epochs = 2;
    let fits = frozen_fits(&emitter, &d, cfg.fit_seed).unwrap();
    let (record, model) = fresh_reader_train(&emitter, &fits, &d, &cfg, 5).unwrap();
    assert!(record.steps.iter().all(|s| s.emitter_grad_max == 0.0));
    assert_eq!(model.anchor, emitter.anchor);
    assert_eq!(model.coord, emitter.coord);
    assert_eq!(model.schedule, emitter.schedule);
    assert_eq!(model.packaging, PackagingMode::ResidualOnly);
}
