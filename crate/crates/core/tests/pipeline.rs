use smec::adapter::{AdapterStack, Compressor};
use smec::dataset::{synth_planted, PlantedSpec};
use smec::evaluation::{
    evaluate_retrieval, mean_ndcg, run_ablation, run_memory_sweep, train_any, ABLATION_ROWS, NDCG_K,
};
use smec::trainer::{train_smrl, NoopObserver, TrainConfig, TrainData, TrainMode};

fn small_data(seed: u64) -> TrainData {
    let p = synth_planted(&PlantedSpec {
        total_dim: 16,
        signal_dims: vec![1, 5, 9, 14],
        noise_scale: 0.05,
        n_queries: 40,
        n_docs: 160,
        seed,
    })
    .unwrap();
    TrainData::new(p.queries, p.docs, p.qrels, 0.2).unwrap()
}

fn quick(trajectory: &[usize]) -> TrainConfig {
    TrainConfig {
        trajectory: trajectory.to_vec(),
        batch_size: 8,
        epochs_per_stage: 2,
        patience: 0,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn staged_training_is_deterministic() {
    let data = small_data(1);
    let cfg = quick(&[16, 8, 4]);
    let (a, ra) = train_smrl(None, &data, &cfg, &mut NoopObserver).unwrap();
    let (b, rb) = train_smrl(None, &data, &cfg, &mut NoopObserver).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(ra, rb);
}

#[test]
fn resumed_training_adds_only_the_new_stage() {
    let data = small_data(2);
    let (first, _) = train_smrl(None, &data, &quick(&[16, 8]), &mut NoopObserver).unwrap();
    // Checkpoints hold f32, so the reference is the restored stack.
    let restored = AdapterStack::from_bytes(&first.to_bytes()).unwrap();
    let (resumed, reports) = train_smrl(Some(restored.clone()), &data, &quick(&[16, 8, 4]), &mut NoopObserver).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!((reports[0].in_dim, reports[0].out_dim), (8, 4));
    assert_eq!(resumed.stages()[0], restored.stages()[0]);
    assert!(resumed.stages().iter().all(|s| s.is_frozen()));

    let bad = quick(&[16, 4]);
    assert!(train_smrl(Some(first), &data, &bad, &mut NoopObserver).is_err());
}

#[test]
fn both_modes_produce_usable_compressors() {
    let data = small_data(3);
    for mode in [TrainMode::Smrl, TrainMode::Mrl] {
        let cfg = TrainConfig {
            mode,
            ..quick(&[16, 8, 4])
        };
        let (c, reports) = train_any(&data, &cfg, &mut NoopObserver).unwrap();
        assert!(!reports.is_empty());
        let c = Compressor::from_bytes(&c.to_bytes()).unwrap();
        for dim in [8, 4] {
            let scores = evaluate_retrieval(
                &c,
                &data.queries,
                &data.docs,
                &data.qrels,
                &data.val_queries,
                dim,
                NDCG_K,
            )
            .unwrap();
            let m = mean_ndcg(&scores);
            assert!((0.0..=1.0).contains(&m), "{mode:?} dim {dim}: {m}");
        }
    }
}

#[test]
fn ablation_table_has_one_row_per_variant() {
    let data = small_data(4);
    let table = run_ablation(&data, &quick(&[16, 8, 4])).unwrap();
    assert_eq!(table.dims, vec![8, 4]);
    assert_eq!(table.rows.len(), ABLATION_ROWS.len());
    for (row, (name, _)) in table.rows.iter().zip(ABLATION_ROWS) {
        assert_eq!(row.name, name);
        assert_eq!(row.ndcg.len(), 2);
        assert!(row.ndcg.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn memory_sweep_bank_grows_with_capacity() {
    let data = small_data(5);
    let rows = run_memory_sweep(&data, &quick(&[16, 8]), &[4, 400]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].mean_bank_len <= 4.0);
    assert!(rows[1].mean_bank_len > rows[0].mean_bank_len);
    assert!(rows.iter().all(|r| r.steps > 0 && r.mean_step_secs > 0.0));
}
