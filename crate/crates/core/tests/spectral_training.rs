use scakernel::data::linspace;
use scakernel::grid::{Domain1D, Grid1D};
use scakernel::ls::StiffnessField;
use scakernel::spectral::{
    default_fno_training, mean_relative_error_fno, train_fno, FieldSample, FnoConfig, FnoModel,
};
use scakernel::train::TrainConfig;
use scakernel::Exec;

const HELD_OUT: [usize; 3] = [1, 5, 9];

fn dataset() -> (Vec<FieldSample>, Vec<FieldSample>) {
    let grid = Grid1D::uniform(Domain1D::new(0.0, 10.0).unwrap(), 256).unwrap();
    let c = StiffnessField::inverse_quadratic(&grid).unwrap();
    let (mut train, mut test) = (vec![], vec![]);
    for (i, eps) in linspace(0.05, 0.35, 11).into_iter().enumerate() {
        let s = FieldSample::from_full_field(&c, eps).unwrap();
        if HELD_OUT.contains(&i) {
            test.push(s)
        } else {
            train.push(s)
        }
    }
    (train, test)
}

#[test]
fn full_field_operator_generalizes_across_strains() {
    let (train, test) = dataset();
    let model = FnoModel::init(FnoConfig::default(), 0).unwrap();
    let (trained, history) = train_fno(model, &train, &test, &default_fno_training()).unwrap();
    let err = mean_relative_error_fno(&trained, &test, Exec::default()).unwrap();
    eprintln!(
        "fno held-out relative L2 {err:.4e} after {} epochs",
        history.len()
    );
    assert_eq!(history.last().unwrap().test_loss, Some(err));
    assert!(err < 0.05, "{err}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let (train, _) = dataset();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let config = FnoConfig {
        n_v: 4,
        layers: 2,
        m_max: 8,
        ..FnoConfig::default()
    };
    let run = || {
        train_fno(
            FnoModel::init(config.clone(), 7).unwrap(),
            &train,
            &[],
            &cfg,
        )
        .unwrap()
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}
