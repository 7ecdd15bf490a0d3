use frk_bench::{grid_baus, grid_model};
use frk_core::{KType, Variant};

#[test]
fn grid_model_matches_request() {
    let model = grid_model(20, 150, 1, KType::BlockExponential, Variant::Case2, 4);
    assert_eq!(model.baus().len(), 400);
    assert_eq!(model.m(), 150);
    assert_eq!(model.r(), 9);
    assert_eq!(model.k_type(), KType::BlockExponential);
    assert!((model.sigma2_eps() - 1.0).abs() < 1e-12);
}

#[test]
fn grid_baus_tile_the_unit_square() {
    let b = grid_baus(8);
    let e = b.extent();
    assert_eq!(e.min, [0.0, 0.0]);
    assert!((e.max[0] - 1.0).abs() < 1e-12 && (e.max[1] - 1.0).abs() < 1e-12);
    assert!(b.lattice_positions().is_some());
}
