use std::fs;

use proptest::prelude::*;

use omitopics::dataio::{
    apply_scenario_mask, load_dataset, load_scenario, merge_truth, save_dataset, save_scenario, CountMatrix, ModalityInfo,
    TruthStore,
};
use omitopics::params::{decode_checkpoint, encode_checkpoint, init_params, load_checkpoint, save_checkpoint};
use omitopics::synthgen::{generate, SynthSpec};
use omitopics::{Dataset, DomainBlock, ModalityMatrix, ModelHyper, PoeMode};

fn citeseq() -> omitopics::synthgen::SynthOutput {
    generate(&SynthSpec::preset("citeseq", 11).unwrap()).unwrap()
}

#[test]
fn synthetic_dataset_survives_disk() {
    let out = citeseq();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&out.dataset, dir.path()).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), out.dataset);
}

#[test]
fn masking_then_merging_restores_the_complete_dataset() {
    let out = citeseq();
    let (masked, truth) = apply_scenario_mask(&out.complete, &out.scenario).unwrap();
    assert_eq!(masked, out.dataset);
    assert_eq!(truth, out.truth);
    assert_eq!(merge_truth(&masked, &truth).unwrap(), out.complete);

    // The held-out store persists through the regular manifest format.
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&truth.to_dataset(&out.complete).unwrap(), dir.path()).unwrap();
    let back = TruthStore::from_dataset(&load_dataset(manifest).unwrap());
    for e in &truth.entries {
        assert_eq!(back.get(&e.domain_id, &e.matrix.modality_id), Some(&e.matrix));
    }
}

#[test]
fn scenario_file_round_trip() {
    let out = citeseq();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    save_scenario(&out.scenario, &path).unwrap();
    assert_eq!(load_scenario(&path).unwrap(), out.scenario);
    assert_eq!(out.scenario.masks.len(), 2);
}

#[test]
fn checkpoint_file_round_trip_for_every_preset() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["citeseq", "multiome", "combine"] {
        let out = generate(&SynthSpec::preset(name, 0).unwrap()).unwrap();
        let hyper = ModelHyper { n_topics: 10, poe_mode: PoeMode::PaperLiteral, ..ModelHyper::default() };
        let params = init_params(&hyper, &out.dataset.schema()).unwrap();
        let path = dir.path().join(format!("{name}.ckpt"));
        save_checkpoint(&params, &hyper, &path).unwrap();
        let (p, h) = load_checkpoint(&path).unwrap();
        assert_eq!((p, h), (params.clone(), hyper.clone()));
        assert_eq!(fs::read(&path).unwrap(), encode_checkpoint(&params, &hyper));
    }
}

#[test]
fn every_truncation_is_rejected() {
    let out = citeseq();
    let hyper = ModelHyper { n_topics: 4, embed_dim: 3, encoder_hidden: 5, ..ModelHyper::default() };
    let bytes = encode_checkpoint(&init_params(&hyper, &out.dataset.schema()).unwrap(), &hyper);
    for cut in (0..bytes.len()).step_by(7) {
        assert!(decode_checkpoint(&bytes[..cut]).is_err(), "prefix of {cut} bytes decoded");
    }
}

fn single_modality(rows: Vec<Vec<u32>>) -> Dataset {
    let n_features = rows.first().map_or(0, Vec::len);
    let cells: Vec<String> = (0..rows.len()).map(|i| format!("c{i}")).collect();
    let features: Vec<String> = (0..n_features).map(|v| format!("f{v}")).collect();
    let block = DomainBlock {
        domain_id: "d".into(),
        cell_ids: cells.clone(),
        labels: None,
        modalities: vec![ModalityMatrix {
            modality_id: "GEX".into(),
            cell_ids: cells,
            feature_ids: features.clone(),
            counts: CountMatrix::from_dense(&rows),
        }],
    };
    Dataset::new(vec![block], vec![ModalityInfo { id: "GEX".into(), feature_ids: features }]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_count_matrices_round_trip(
        rows in (1usize..6).prop_flat_map(|v| prop::collection::vec(prop::collection::vec(0u32..1000, v), 1..8))
    ) {
        let ds = single_modality(rows);
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        prop_assert_eq!(load_dataset(manifest).unwrap(), ds);
    }
}
