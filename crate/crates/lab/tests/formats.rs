use tmle_lens::formats::{
    decode_activations, decode_checkpoint, decode_coder, decode_dataset, encode_activations, encode_checkpoint,
    encode_coder, encode_dataset, fingerprint_of, ActivationDump, Checkpoint,
};
use tmle_lens_core::decomp::{train_sae, SaeConfig, SaeVariant};
use tmle_lens_core::dgp::{generate, standardize, DgpSpec};
use tmle_lens_core::nnet::{train, Activation, MultiTaskNet, NetConfig, TrainConfig};
use tmle_lens_core::Matrix;

fn trained() -> Checkpoint {
    let raw = generate(&DgpSpec::ds2(300), 1).unwrap();
    let (w, scaler) = standardize(&raw.w).unwrap();
    let data = tmle_lens_core::dgp::Dataset { w, ..raw };
    let net = MultiTaskNet::init(&NetConfig {
        input_dim: 6,
        hidden_layers: 2,
        hidden_size: 8,
        activation: Activation::Relu,
        seed: 2,
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let (net, report) = train(&net, &data, &cfg).unwrap();
    Checkpoint {
        net,
        scaler,
        history: report.history,
    }
}

#[test]
fn checkpoint_round_trip_keeps_history() {
    let ck = trained();
    assert_eq!(ck.history.len(), 4);
    let fp = fingerprint_of("run");
    let bytes = encode_checkpoint(&ck, &fp);
    assert_eq!(decode_checkpoint(&bytes, Some(&fp)).unwrap(), ck);
    assert_eq!(decode_checkpoint(&bytes, None).unwrap(), ck);
    assert!(decode_checkpoint(&bytes, Some(&fingerprint_of("other"))).is_err());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 8], None).is_err());
    // wrong magic
    assert!(decode_dataset(&bytes, None).is_err());
}

#[test]
fn coders_round_trip_for_every_variant() {
    let acts = Matrix::from_fn(200, 4, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0);
    let fp = fingerprint_of("sae");
    for variant in [
        SaeVariant::L1 { lambda: 0.05 },
        SaeVariant::TopK { k_active: 3 },
        SaeVariant::JumpRelu {
            theta: 0.1,
            lambda: 0.05,
        },
    ] {
        let mut cfg = SaeConfig::new(4, 8, variant);
        cfg.epochs = 2;
        let (model, _) = train_sae(&acts, &cfg).unwrap();
        let back = decode_coder(&encode_coder(&model, &fp), Some(&fp)).unwrap();
        assert_eq!(back, model, "{variant:?}");
    }
}

#[test]
fn activation_and_dataset_dumps_round_trip() {
    let fp = fingerprint_of("acts");
    let dump = ActivationDump {
        layer: 3,
        acts: Matrix::from_fn(5, 2, |i, j| i as f64 - 0.1 * j as f64),
    };
    assert_eq!(
        decode_activations(&encode_activations(&dump, &fp), Some(&fp)).unwrap(),
        dump
    );
    let ds = generate(&DgpSpec::ds1(40), 9).unwrap();
    assert_eq!(decode_dataset(&encode_dataset(&ds, &fp), Some(&fp)).unwrap(), ds);
}
