use cfsnet::degrade::{procedural_dataset, DegradationSpec};
use cfsnet::eval::{
    compare_methods, fidelity, is_grid_unimodal, sweep_alpha, Adaptive, AlphaGrid, Dni, MainOnly, Psnr, Restorer,
    SharedAlpha, SweepReport,
};
use cfsnet::image::Image;
use cfsnet::model::{CfsModel, ModelConfig};
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig { modules: 2, channels: 4, control_dim: 6, mapper_hidden_dims: [5, 5, 5], ..ModelConfig::default() }
}

fn dataset() -> Vec<Image> {
    procedural_dataset(21, 3, 1, 12, 10)
}

fn spec() -> DegradationSpec {
    DegradationSpec::awgn(30.0, 4)
}

#[test]
fn psnr_closed_forms() {
    // 20 log10(255 / rmse)
    let base = Image::filled(1, 8, 8, 100.0);
    let one = base.map(|v| v + 1.0);
    let ten = base.map(|v| v - 10.0);
    let f1 = fidelity(&one, &base).unwrap();
    assert_eq!(f1.rmse, 1.0);
    assert!((f1.psnr.value() - 48.1308).abs() < 1e-4, "{}", f1.psnr);
    let f10 = fidelity(&ten, &base).unwrap();
    assert_eq!(f10.rmse, 10.0);
    assert!((f10.psnr.value() - 28.1308).abs() < 1e-4, "{}", f10.psnr);
    assert!((Psnr::from_rmse(255.0).value()).abs() < 1e-12);
}

#[test]
fn identical_images_have_infinite_psnr() {
    let img = dataset().remove(0);
    let f = fidelity(&img, &img).unwrap();
    assert_eq!(f.rmse, 0.0);
    assert_eq!(f.psnr, Psnr::Infinite);
    assert!(f.psnr.value().is_infinite());
}

#[test]
fn shape_mismatch_is_an_error() {
    assert!(fidelity(&Image::filled(1, 4, 4, 0.0), &Image::filled(1, 4, 5, 0.0)).is_err());
    assert!(fidelity(&Image::filled(3, 4, 4, 0.0), &Image::filled(1, 4, 4, 0.0)).is_err());
}

proptest! {
    #[test]
    fn fidelity_is_symmetric_and_shift_invariant(seed in any::<u64>(), shift in -50.0f32..50.0) {
        let imgs = procedural_dataset(seed, 2, 1, 6, 7);
        let (a, b) = (&imgs[0], &imgs[1]);
        let ab = fidelity(a, b).unwrap();
        prop_assert_eq!(ab, fidelity(b, a).unwrap());
        let moved = fidelity(&a.map(|v| v + shift), &b.map(|v| v + shift)).unwrap();
        prop_assert!((moved.rmse - ab.rmse).abs() < 1e-3 * ab.rmse.max(1.0));
    }
}

#[test]
fn sweep_has_one_entry_per_grid_point() {
    let model = CfsModel::build(tiny(), 1).unwrap();
    let grid = AlphaGrid::parse("0:1:0.1").unwrap();
    let report = sweep_alpha(&Adaptive(&model), &dataset(), &spec(), &grid).unwrap();
    assert_eq!(report.grid.len(), 11);
    assert_eq!(report.mean_psnr.len(), 11);
    assert_eq!(report.per_image_psnr.len(), 3);
    assert!(report.per_image_psnr.iter().all(|r| r.len() == 11));
    assert_eq!(report.method, "cfsnet");
    assert_eq!(report.model_id, model.model_id());
    let k = report.grid.iter().position(|&a| a == report.best_alpha).unwrap();
    assert!(report.mean_psnr.iter().all(|p| p.value() <= report.best_psnr.value()));
    assert_eq!(report.mean_psnr[k], report.best_psnr);
    // Mean PSNR is the mean of the per-image values, not PSNR of the mean error.
    for k in 0..11 {
        let mean = report.per_image_psnr.iter().map(|r| r[k].value()).sum::<f64>() / 3.0;
        assert!((report.mean_psnr[k].value() - mean).abs() < 1e-9);
    }
}

#[test]
fn single_point_grid() {
    let model = CfsModel::build(tiny(), 1).unwrap();
    let report = sweep_alpha(&Adaptive(&model), &dataset(), &spec(), &AlphaGrid::parse("0").unwrap()).unwrap();
    assert_eq!(report.grid, vec![0.0]);
    assert_eq!(report.best_alpha, 0.0);
}

#[test]
fn zero_control_sweep_equals_main_only_sweep() {
    let model = CfsModel::build(tiny(), 2).unwrap();
    let grid = AlphaGrid::new(vec![0.0]).unwrap();
    let a = sweep_alpha(&Adaptive(&model), &dataset(), &spec(), &grid).unwrap();
    let m = sweep_alpha(&MainOnly(&model), &dataset(), &spec(), &grid).unwrap();
    assert_eq!(a.per_image_psnr, m.per_image_psnr);
    assert_eq!(a.per_image_rmse, m.per_image_rmse);
    let img = &dataset()[0];
    let noisy = spec().apply(img, 0).unwrap();
    let x = Adaptive(&model).restore(&noisy, 0.0).unwrap();
    let y = MainOnly(&model).restore(&noisy, 0.7).unwrap();
    assert_eq!(x, y);
}

#[test]
fn sweeps_are_reproducible() {
    let model = CfsModel::build(tiny(), 3).unwrap();
    let grid = AlphaGrid::parse("0:1:0.25").unwrap();
    let a = sweep_alpha(&SharedAlpha(&model), &dataset(), &spec(), &grid).unwrap();
    let b = sweep_alpha(&SharedAlpha(&model), &dataset(), &spec(), &grid).unwrap();
    assert_eq!(a, b);
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(serde_json::from_str::<SweepReport>(&json).unwrap(), a);
}

#[test]
fn empty_dataset_is_an_error() {
    let model = CfsModel::build(tiny(), 3).unwrap();
    assert!(sweep_alpha(&Adaptive(&model), &[], &spec(), &AlphaGrid::parse("0").unwrap()).is_err());
}

#[test]
fn csv_layouts() {
    let model = CfsModel::build(tiny(), 3).unwrap();
    let report = sweep_alpha(&Adaptive(&model), &dataset(), &spec(), &AlphaGrid::parse("0,0.5").unwrap()).unwrap();
    let csv = report.to_csv();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,mean_psnr,mean_rmse");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("0.5,"));
    let long = report.to_long_csv();
    assert_eq!(long.lines().next().unwrap(), "image,alpha,psnr,rmse");
    assert_eq!(long.lines().count(), 1 + 3 * 2);
}

#[test]
fn dni_endpoints_equal_the_source_networks() {
    let a = CfsModel::build(tiny(), 10).unwrap();
    let b = CfsModel::build(tiny(), 11).unwrap();
    let dni = Dni::new(&a, &b).unwrap();
    let noisy = spec().apply(&dataset()[1], 1).unwrap();
    assert_eq!(dni.restore(&noisy, 0.0).unwrap(), MainOnly(&a).restore(&noisy, 0.0).unwrap());
    assert_eq!(dni.restore(&noisy, 1.0).unwrap(), MainOnly(&b).restore(&noisy, 0.0).unwrap());
    assert!(dni.restore(&noisy, 0.5).is_ok());
    let other = CfsModel::build(ModelConfig { channels: 3, ..tiny() }, 1).unwrap();
    assert!(Dni::new(&a, &other).is_err());
}

#[test]
fn comparison_rows_are_ordered_by_method_then_alpha() {
    let cfs = CfsModel::build(tiny(), 1).unwrap();
    let sa = CfsModel::build(tiny(), 2).unwrap();
    let (a, b) = (CfsModel::build(tiny(), 3).unwrap(), CfsModel::build(tiny(), 4).unwrap());
    let grid = AlphaGrid::parse("1,0,0.5").unwrap();
    let cmp = compare_methods(&cfs, &sa, Some((&a, &b)), &dataset(), &spec(), &grid).unwrap();
    let keys: Vec<(String, f64)> = cmp.rows.iter().map(|r| (r.method.clone(), r.alpha)).collect();
    let expected: Vec<(String, f64)> =
        ["cfsnet", "cfsnet-sa", "dni"].iter().flat_map(|m| [0.0, 0.5, 1.0].map(|a| (m.to_string(), a))).collect();
    assert_eq!(keys, expected);
    let dni = cmp.report("dni").unwrap();
    let direct = sweep_alpha(&Dni::new(&a, &b).unwrap(), &dataset(), &spec(), &grid).unwrap();
    assert_eq!(dni, &direct);
    assert_eq!(cmp.to_csv().lines().count(), 1 + 9);

    let without = compare_methods(&cfs, &sa, None, &dataset(), &spec(), &grid).unwrap();
    assert_eq!(without.reports.len(), 2);
    assert!(without.report("dni").is_none());
}

#[test]
fn unimodality_tolerance() {
    assert!(is_grid_unimodal(&[20.0, 20.5, 20.9, 20.6], 0.01));
    assert!(!is_grid_unimodal(&[20.0, 20.5, 20.3, 20.6], 0.01));
    assert!(is_grid_unimodal(&[20.0, 20.5, 20.495, 20.6], 0.01));
    assert!(is_grid_unimodal(&[20.0], 0.01));
}
