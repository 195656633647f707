//! Dataset, checkpoint, CSV and config files read back exactly what was written.

use proptest::prelude::*;
use sane_core::contrastive::MlpEncoder;
use sane_core::numerics::SeededRng;
use sane_core::shallow_net::{Activation, ShallowNet};
use sane_core::synthdata::{corrupt_labels, generate_dataset, DatasetParams};
use sane_core::theory::{run_recovery, AlphaSchedule, RecoveryConfig};
use sane_lab::formats::{read_dataset, read_encoder, read_shallow_net, write_dataset, write_encoder, write_shallow_net};
use sane_lab::records::{parse_recovery_csv, recovery_csv, RECOVERY_HEADER};
use sane_lab::{Command, ExperimentConfig};

fn activation() -> impl Strategy<Value = Activation> {
    prop::sample::select(Activation::ALL.to_vec())
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_round_trips_bit_exactly(
        seed in any::<u64>(),
        centers in 2usize..6,
        classes in 2usize..4,
        epsilon in 0.0f64..0.3,
        rho in 0.0f64..0.5,
    ) {
        let classes = classes.min(centers);
        let params = DatasetParams { centers, classes, dim: 5, n: 8 * centers, epsilon, delta: 0.5, ..DatasetParams::default() };
        let mut rng = SeededRng::new(seed, "fmt");
        let (cs, clean) = generate_dataset(&params, &mut rng).unwrap();
        let data = corrupt_labels(&clean, rho, &mut rng).unwrap();
        let text = write_dataset(&cs, &data, params.delta);
        let file = read_dataset(&text).unwrap();
        prop_assert_eq!(bits(file.data.crops.as_slice()), bits(data.crops.as_slice()));
        prop_assert_eq!(bits(file.centers.centers.as_slice()), bits(cs.centers.as_slice()));
        prop_assert_eq!(&file.data, &data);
        prop_assert_eq!(&file.centers, &cs);
        prop_assert_eq!(file.delta.to_bits(), params.delta.to_bits());
        prop_assert_eq!(write_dataset(&file.centers, &file.data, file.delta), text);
    }

    #[test]
    fn shallow_net_round_trips_bit_exactly(seed in any::<u64>(), half_k in 1usize..10, d in 1usize..8, act in activation()) {
        let net = ShallowNet::init_gaussian(2 * half_k, d, act, &mut SeededRng::new(seed, "net")).unwrap();
        let back = read_shallow_net(&write_shallow_net(&net)).unwrap();
        prop_assert_eq!(bits(back.weights().as_slice()), bits(net.weights().as_slice()));
        prop_assert_eq!(back, net);
    }

    #[test]
    fn encoder_round_trips_bit_exactly(
        seed in any::<u64>(),
        widths in prop::collection::vec(1usize..7, 2..5),
        act in activation(),
    ) {
        let enc = MlpEncoder::new(&widths, act, &mut SeededRng::new(seed, "enc")).unwrap();
        let back = read_encoder(&write_encoder(&enc)).unwrap();
        prop_assert_eq!(bits(&back.params()), bits(&enc.params()));
        prop_assert_eq!(back, enc);
    }
}

#[test]
fn dataset_indices_are_one_based_in_files() {
    let params = DatasetParams { centers: 3, classes: 3, n: 9, delta: 0.5, ..DatasetParams::default() };
    let (cs, data) = generate_dataset(&params, &mut SeededRng::new(1, "fmt")).unwrap();
    let text = write_dataset(&cs, &data, params.delta);
    let crop_lines: Vec<&str> = text.lines().skip(1 + cs.len()).collect();
    for (line, c) in crop_lines.iter().zip(&data.center_of) {
        assert_eq!(line.split_whitespace().next().unwrap(), (c + 1).to_string());
    }
    let zero_based = text.replacen(&format!("\n{} ", data.center_of[0] + 1), "\n0 ", 1);
    assert!(read_dataset(&zero_based).is_err());
}

#[test]
fn malformed_files_are_format_errors() {
    for bad in ["", "1 2 3", "2 2 softplus\n0.1 0.2\n"] {
        assert_eq!(read_shallow_net(bad).unwrap_err().exit_code(), 4);
    }
    assert_eq!(read_encoder("softplus 2 2\n1 2\n").unwrap_err().exit_code(), 4);
    assert_eq!(read_dataset("1 1 1 1 0 1").unwrap_err().exit_code(), 4);
    let net = ShallowNet::init_gaussian(2, 2, Activation::Tanh, &mut SeededRng::new(0, "n")).unwrap();
    let trailing = write_shallow_net(&net) + "0 0\n";
    assert!(read_shallow_net(&trailing).is_err());
}

#[test]
fn recovery_csv_round_trips_and_header_only_is_empty() {
    let config = RecoveryConfig {
        hidden: 16,
        iterations: 10,
        alpha: AlphaSchedule::Constant(0.5),
        data: DatasetParams { n: 40, ..DatasetParams::default() },
        ..RecoveryConfig::default()
    };
    let rows = run_recovery(&config).unwrap().rows;
    let text = recovery_csv(&rows);
    let back = parse_recovery_csv(&text).unwrap();
    assert_eq!(back.len(), rows.len());
    for (a, b) in back.iter().zip(&rows) {
        assert_eq!(a.iter, b.iter);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.resid_sminus.to_bits(), b.resid_sminus.to_bits());
    }
    let header_only = recovery_csv(&[]);
    assert_eq!(header_only, RECOVERY_HEADER.join(",") + "\n");
    assert!(parse_recovery_csv(&header_only).unwrap().is_empty());
    assert!(parse_recovery_csv("iter,loss\n0,1\n").is_err());
}

#[test]
fn every_repo_config_parses_and_round_trips() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let config = ExperimentConfig::parse(&text, None, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = ExperimentConfig::parse(&config.to_text(), None, &[]).unwrap();
        assert_eq!(again, config, "{}", path.display());
        sane_lab::plan(&config).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn overrides_win_and_bad_values_are_config_errors() {
    let overrides = vec![("data.n".to_string(), "60".to_string())];
    let c = ExperimentConfig::parse("seed = 1\ndata.n = 40\n", Some(Command::GenData), &overrides).unwrap();
    assert_eq!(c.count("data.n").unwrap(), 60);
    let bad = ExperimentConfig::parse("seed = 1\ndata.rho = 2\n", Some(Command::GenData), &[]).unwrap();
    assert_eq!(sane_lab::plan(&bad).unwrap_err().exit_code(), 2);
    let bad = ExperimentConfig::parse("seed = 1\ncontrastive.tau = 0\n", Some(Command::TrainSane), &[]).unwrap();
    assert_eq!(sane_lab::plan(&bad).unwrap_err().exit_code(), 2);
}
