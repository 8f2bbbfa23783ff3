use msdc_core::dataset::{export_house, load_house, LoadOptions};
use msdc_core::signal::PowerSeries;
use msdc_core::Error;
use proptest::prelude::*;

fn series(start: u32, values: Vec<f64>) -> PowerSeries {
    PowerSeries::new(1_300_000_000.0 + f64::from(start) * 3.0, 3.0, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn export_then_load_is_value_identical(
        start in 0u32..100_000,
        rows in prop::collection::vec((0.0f64..5000.0, 0.0f64..3000.0), 4..300),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        let mains: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y + 17.25).collect();
        let dir = tempfile::tempdir().unwrap();
        let channels = vec![
            ("kettle".to_string(), series(start, a)),
            ("refrigerator".to_string(), series(start, b)),
        ];
        export_house(dir.path(), "7", &series(start, mains.clone()), &channels).unwrap();
        let names = vec!["kettle".to_string(), "fridge".to_string()];
        let house = load_house(dir.path(), "7", &names, &LoadOptions::default()).unwrap();
        prop_assert_eq!(house.mains.values(), &mains[..]);
        prop_assert_eq!(house.channel("kettle").unwrap(), &channels[0].1);
        // the alias table maps refrigerator onto fridge
        prop_assert_eq!(house.channel("fridge").unwrap(), &channels[1].1);
    }
}

#[test]
fn missing_appliance_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let s = series(0, vec![1.0; 10]);
    export_house(dir.path(), "1", &s, &[("kettle".to_string(), s.clone())]).unwrap();
    let err = load_house(dir.path(), "1", &["dishwasher".to_string()], &LoadOptions::default()).unwrap_err();
    assert!(matches!(err, Error::MissingChannel { .. }), "{err}");
    assert_eq!(err.class().exit_code(), 2);
    let err = load_house(dir.path(), "2", &["kettle".to_string()], &LoadOptions::default()).unwrap_err();
    assert!(matches!(err, Error::MissingLabels(_)), "{err}");
}
