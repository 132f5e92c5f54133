use paneitz_lab::metrics::{build_family, FamilyParams};

#[test]
#[ignore]
fn probe_bump_magnitude() {
    let b = build_family("bump5", &FamilyParams::default()).unwrap();
    for x in [
        [4.0, 0.0, 0.0, 0.0, 0.0],
        [2.0, 2.0, 2.0, 1.0, 1.0],
        [-3.0, 1.5, -1.0, 2.0, 0.5],
        [0.0, 0.0, 3.0, -3.0, 0.0],
    ] {
        let mj = b.jets_at(&x, 0).unwrap();
        let g = mj.value_metric();
        let mut dev = 0.0f64;
        for i in 0..5 {
            for j in 0..5 {
                let flat = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((g.lower(i, j) - flat).abs());
            }
        }
        println!("x={x:?} |g - delta|_max = {dev:.4e} det = {:.4e}", g.det());
    }
}
