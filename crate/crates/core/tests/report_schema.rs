use std::path::Path;

use rankloss::fixture::BlobSpec;
use rankloss::network::train_toy;
use rankloss::optimizer::{EpsilonChoice, GradientRefresh};
use rankloss::report::report_to_json;
use rankloss::{compress_network, CompressionConfig, Mode};
use serde_json::Value;

fn validator() -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/report.schema.json");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = v
        .iter_errors(doc)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn reports_match_the_schema() {
    let v = validator();
    let data = BlobSpec {
        classes: 3,
        samples: 150,
        dims: 5,
    }
    .generate(2)
    .unwrap();
    let net = train_toy(&[5, 20, 20, 3], &data, 200, 0.1, 1)
        .unwrap()
        .network;
    let configs = [
        CompressionConfig::default(),
        CompressionConfig {
            mode: Mode::Compact,
            epsilon: EpsilonChoice::Fixed(0.05),
            ..Default::default()
        },
        CompressionConfig {
            refresh: GradientRefresh::PerLayer,
            epsilon: EpsilonChoice::Fixed(1e-9),
            ..Default::default()
        },
    ];
    for config in configs {
        let (compressed, mut report) = compress_network(&net, &data, &config).unwrap();
        assert_valid(&v, &serde_json::from_str(&report_to_json(&report)).unwrap());
        report.add_holdout(&net, &compressed, &data).unwrap();
        assert_valid(&v, &serde_json::from_str(&report_to_json(&report)).unwrap());
    }
}

#[test]
fn schema_rejects_malformed_reports() {
    let v = validator();
    let data = BlobSpec {
        classes: 2,
        samples: 40,
        dims: 3,
    }
    .generate(1)
    .unwrap();
    let net = train_toy(&[3, 8, 2], &data, 20, 0.1, 1).unwrap().network;
    let (_, report) = compress_network(&net, &data, &CompressionConfig::default()).unwrap();
    let good: Value = serde_json::from_str(&report_to_json(&report)).unwrap();
    assert!(v.is_valid(&good));

    let mut extra = good.clone();
    extra["elapsed_ms"] = 12.into();
    assert!(!v.is_valid(&extra));
    let mut bad_mode = good.clone();
    bad_mode["config"]["mode"] = "fast".into();
    assert!(!v.is_valid(&bad_mode));
    let mut missing = good.clone();
    missing["layers"][0].as_object_mut().unwrap().remove("rank");
    assert!(!v.is_valid(&missing));
    let mut both = good;
    both["layers"][0]["rank"] = 1.into();
    both["layers"][0]["skip_reason"] = "lossless-violated".into();
    assert!(!v.is_valid(&both));
}
