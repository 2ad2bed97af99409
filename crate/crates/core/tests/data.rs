use agp::data::imageops::mean_gray;
use agp::data::{generate_toy_dataset, Label, ToySpec, MAX_DEFECT_FRACTION, MIN_DEFECT_FRACTION};

#[test]
fn toy_defects_respect_area_and_contrast_bounds_over_1000_images() {
    let spec = ToySpec {
        n_categories: 2,
        n_train_per_cat: 1,
        n_test_normal: 1,
        n_test_anomalous: 500,
        seed: 21,
        ..ToySpec::default()
    };
    let m = generate_toy_dataset(&spec).unwrap();
    let mut checked = 0;
    for s in m.test().filter(|s| s.label == Label::Anomalous) {
        let img = s.load().unwrap();
        let mask = img.gt_mask.as_ref().expect("defective image has a mask");
        let frac = mask.iter().filter(|&&v| v).count() as f64 / mask.len() as f64;
        assert!(
            (MIN_DEFECT_FRACTION..=MAX_DEFECT_FRACTION).contains(&frac),
            "{}: defect fraction {frac}",
            s.id
        );
        let contrast = (mean_gray(img.pixels.view(), mask.view(), true)
            - mean_gray(img.pixels.view(), mask.view(), false))
        .abs();
        assert!(contrast >= spec.min_contrast, "{}: contrast {contrast}", s.id);
        checked += 1;
    }
    assert_eq!(checked, 1000);
}
