use fedquant::codec::{bit_budget, decode, encode, encoded_len, packed_len, HEADER_LEN};
use fedquant::federation::{
    AggregationStrategy, BitWidthConfig, ClientUpdate, LayerPayload, Weighting,
};
use fedquant::nn::Architecture;
use fedquant::quant::QuantizedTensor;
use fedquant::Error;
use proptest::prelude::*;

fn max_level(bits: u8) -> u32 {
    if bits == 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

fn quantized_layer() -> impl Strategy<Value = LayerPayload> {
    (1u8..=32, 0usize..300, 1e-6f32..1e6f32).prop_flat_map(|(bits, count, scale)| {
        prop::collection::vec(0..=max_level(bits), count).prop_map(move |levels| {
            LayerPayload::Quantized(QuantizedTensor {
                levels,
                scale: f64::from(scale),
                bits,
            })
        })
    })
}

fn layer() -> impl Strategy<Value = LayerPayload> {
    prop_oneof![
        4 => quantized_layer(),
        1 => prop::collection::vec(any::<f32>().prop_filter("not NaN", |v| !v.is_nan()), 0..50)
            .prop_map(LayerPayload::Full),
    ]
}

fn update() -> impl Strategy<Value = ClientUpdate> {
    (
        any::<u32>(),
        prop::collection::vec(layer(), 0..6),
        any::<bool>(),
        any::<u32>(),
        prop::collection::vec(-1e3f32..1e3, 0..40),
    )
        .prop_flat_map(|(client_id, layers, inverse, size, side_band)| {
            let n = layers.len();
            prop::collection::vec(0f32..10.0, n).prop_map(move |msqe| ClientUpdate {
                client_id,
                layers: layers.clone(),
                weighting: if inverse {
                    Weighting::Msqe(msqe)
                } else {
                    Weighting::DatasetSize(size)
                },
                side_band: side_band.clone(),
            })
        })
}

proptest! {
    #[test]
    fn round_trip_identity(u in update()) {
        let bytes = encode(&u).unwrap();
        prop_assert_eq!(bytes.len(), encoded_len(&u));
        prop_assert_eq!(decode(&bytes).unwrap(), u);
    }

    #[test]
    fn encoding_is_deterministic(u in update()) {
        prop_assert_eq!(encode(&u).unwrap(), encode(&u).unwrap());
    }

    #[test]
    fn truncation_is_detected(u in update(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&u).unwrap();
        let cut = cut.index(bytes.len());
        prop_assert!(matches!(decode(&bytes[..cut]), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn inverse_msqe_bytes_omit_dataset_size(u in update()) {
        let as_msqe = ClientUpdate {
            weighting: Weighting::Msqe(vec![0.5; u.layers.len()]),
            ..u.clone()
        };
        let as_avg = ClientUpdate {
            weighting: Weighting::DatasetSize(12345),
            ..u
        };
        let a = encode(&as_msqe).unwrap();
        let b = encode(&as_avg).unwrap();
        let msqe_fields = 4 * as_msqe.layers.len();
        // same content, minus the 4-byte size, plus one msqe per layer
        prop_assert_eq!(a.len() + 4, b.len() + msqe_fields);
        prop_assert!(decode(&a).unwrap().dataset_size().is_none());
    }

    #[test]
    fn bit_budget_is_monotone(
        bits in prop::array::uniform4(1u8..=31),
        which in 0usize..4,
        inverse in any::<bool>(),
        cifar in any::<bool>(),
    ) {
        let arch = if cifar { Architecture::CifarCnn } else { Architecture::MnistCnn };
        let strategy = if inverse { AggregationStrategy::InverseMsqe } else { AggregationStrategy::FedAvg };
        let mut more = bits;
        more[which] += 1;
        let a = bit_budget(arch, &BitWidthConfig(bits), strategy);
        let b = bit_budget(arch, &BitWidthConfig(more), strategy);
        prop_assert!(b.quantized_bits >= a.quantized_bits);
    }

    #[test]
    fn wire_length_matches_budget(
        bits in prop::array::uniform4(1u8..=32),
        inverse in any::<bool>(),
    ) {
        let arch = Architecture::MnistCnn;
        let strategy = if inverse { AggregationStrategy::InverseMsqe } else { AggregationStrategy::FedAvg };
        let counts = arch.quantizable_counts();
        let layers: Vec<LayerPayload> = counts
            .iter()
            .zip(bits)
            .map(|(&n, b)| LayerPayload::Quantized(QuantizedTensor { levels: vec![0; n], scale: 1.0, bits: b }))
            .collect();
        let u = ClientUpdate {
            client_id: 0,
            layers,
            weighting: if inverse { Weighting::Msqe(vec![0.0; 4]) } else { Weighting::DatasetSize(1) },
            side_band: Vec::new(),
        };
        let budget = bit_budget(arch, &BitWidthConfig(bits), strategy);
        let rounded: u64 = counts.iter().zip(bits).map(|(&n, b)| 8 * packed_len(n, b) as u64).sum();
        let per_layer = if inverse { 64 } else { 32 };
        let exact: u64 = counts.iter().zip(bits).map(|(&n, b)| n as u64 * u64::from(b)).sum();
        prop_assert_eq!(budget.quantized_bits, exact + 4 * per_layer);
        // framing: header, bits + count per layer, dataset size, side-band length, client id
        let framing = 8 * (HEADER_LEN + 4 * 5 + if inverse { 0 } else { 4 } + 4 + 4) as u64;
        let wire = 8 * encode(&u).unwrap().len() as u64;
        prop_assert_eq!(wire, rounded + 4 * per_layer + framing);
        if counts.iter().zip(bits).all(|(&n, b)| n * usize::from(b) % 8 == 0) {
            prop_assert_eq!(wire - framing, budget.quantized_bits);
        }
    }
}

#[test]
fn table_rows() {
    let arch = Architecture::MnistCnn;
    let budget = |s: &str| bit_budget(arch, &s.parse().unwrap(), AggregationStrategy::FedAvg);
    assert!((budget("2-2-2-2").savings_ratio - 15.98).abs() <= 0.01);
    assert!((budget("4-4-4-4").savings_ratio - 8.00).abs() <= 0.01);
    assert_eq!(budget("2-1-1-2").quantized_bits, 83_120);
    assert!((budget("2-1-1-2").savings_ratio - 31.51).abs() <= 0.005);
    let full = budget("32-32-32-32");
    assert_eq!(full.full_precision_bits, 2_619_136);
    assert_eq!(full.quantized_bits, 2_619_264);
    assert!(full.savings_ratio < 1.0);
}

/// Parse the plain-text description written next to each golden payload.
fn describe(text: &str) -> ClientUpdate {
    let mut client_id = 0;
    let mut weighting = None;
    let mut side_band = Vec::new();
    let mut layers = Vec::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap();
        let rest: Vec<&str> = parts.collect();
        let floats = |v: &[&str]| v.iter().map(|x| x.parse::<f32>().unwrap()).collect::<Vec<_>>();
        match key {
            "client_id" => client_id = rest[0].parse().unwrap(),
            "dataset_size" => weighting = Some(Weighting::DatasetSize(rest[0].parse().unwrap())),
            "msqe" => weighting = Some(Weighting::Msqe(floats(&rest))),
            "side_band" => side_band = floats(&rest),
            "full" => layers.push(LayerPayload::Full(floats(&rest))),
            "quantized" => layers.push(LayerPayload::Quantized(QuantizedTensor {
                bits: rest[0].parse().unwrap(),
                scale: rest[1].parse().unwrap(),
                levels: rest[2..].iter().map(|x| x.parse().unwrap()).collect(),
            })),
            other => panic!("unknown line {other}"),
        }
    }
    ClientUpdate {
        client_id,
        layers,
        weighting: weighting.unwrap(),
        side_band,
    }
}

#[test]
fn golden_vectors() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("fqnt") {
            continue;
        }
        let bytes = std::fs::read(&path).unwrap();
        let expected = describe(&std::fs::read_to_string(path.with_extension("txt")).unwrap());
        assert_eq!(decode(&bytes).unwrap(), expected, "{}", path.display());
        assert_eq!(encode(&expected).unwrap(), bytes, "{}", path.display());
        seen += 1;
    }
    assert_eq!(seen, 4);
}
