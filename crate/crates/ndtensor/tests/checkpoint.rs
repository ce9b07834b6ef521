use ndtensor::checkpoint::{self, BLOB_FILE, MANIFEST_FILE};
use ndtensor::{ParameterStore, Tensor};
use proptest::prelude::*;

fn store_from(values: &[Vec<f32>]) -> ParameterStore<f32> {
    let mut s = ParameterStore::new();
    for (i, v) in values.iter().enumerate() {
        s.insert(format!("p.{i}.w"), Tensor::new(vec![v.len()], v.clone()).unwrap())
            .unwrap();
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn encode_decode_is_bit_exact(values in prop::collection::vec(
        prop::collection::vec(prop::num::f32::ANY.prop_filter("finite", |x| x.is_finite()), 1..20), 1..6)) {
        let s = store_from(&values);
        let (manifest, blob) = checkpoint::encode(&s, serde_json::json!({"k": 1}));
        let back = checkpoint::decode(&manifest, &blob).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            let abits: Vec<u32> = a.value.data().iter().map(|x| x.to_bits()).collect();
            let bbits: Vec<u32> = b.value.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(abits, bbits);
        }
    }
}

#[test]
fn save_load_roundtrip_and_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ParameterStore::new();
    s.insert("enc.0.w", Tensor::new(vec![2, 2], vec![1.0f32, -0.0, 3.5, 1e-30]).unwrap())
        .unwrap();
    s.insert("queries", Tensor::new(vec![1, 3], vec![0.1f32, 0.2, 0.3]).unwrap())
        .unwrap();
    checkpoint::save(dir.path(), &s, serde_json::json!({"seed": 7})).unwrap();

    let blob = std::fs::read(dir.path().join(BLOB_FILE)).unwrap();
    assert_eq!(blob.len(), 7 * 4);
    assert_eq!(&blob[4..8], &(-0.0f32).to_le_bytes());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
            .unwrap();
    assert_eq!(manifest["tensors"][1]["offset"], 16);
    assert_eq!(manifest["tensors"][1]["shape"], serde_json::json!([1, 3]));

    let (back, meta) = checkpoint::load(dir.path()).unwrap();
    assert!(back.values_equal(&s));
    assert_eq!(meta["seed"], 7);
}

#[test]
fn truncated_blob_rejected() {
    let s = store_from(&[vec![1.0, 2.0, 3.0]]);
    let (manifest, blob) = checkpoint::encode(&s, serde_json::Value::Null);
    assert!(checkpoint::decode(&manifest, &blob[..8]).is_err());
}
