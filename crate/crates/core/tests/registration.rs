use multirecon::metrics::dice;
use multirecon::phantom::{generate_phantom, PhantomParams};
use multirecon::registration::{propagate_labels, register_rigid, RegistrationConfig};
use multirecon::volume::{resample, resample_transformed, warp_labels, Geometry, Interpolation, RigidTransform};
use multirecon::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_perturbation(rng: &mut ChaCha8Rng) -> RigidTransform {
    let dir: [f64; 3] = [0; 3].map(|_| rng.random_range(-1.0..1.0));
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mag = rng.random_range(0.0..4.0);
    let rot = [0; 3].map(|_| rng.random_range(-5.0..5.0));
    RigidTransform::from_degrees(rot, dir.map(|v| v / n * mag))
}

#[test]
fn recovers_random_rigid_perturbations() {
    let g = Geometry::isotropic(48, 1.1).unwrap();
    let (x, _) = generate_phantom(&PhantomParams::new(29.0, 11).with_grid(g.clone())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = RegistrationConfig::default();
    let mut ok = 0;
    for _ in 0..20 {
        let truth = random_perturbation(&mut rng);
        let fixed = resample_transformed(&x, &truth, &g, Interpolation::Linear);
        let r = register_rigid(&x, &fixed, &RigidTransform::identity(), &cfg).unwrap();
        assert!(r.final_cost <= r.initial_cost);
        let (deg, mm) = r.transform.compose(&truth.inverse()).magnitude();
        if mm / 1.1 <= 0.2 && deg <= 0.5 {
            ok += 1;
        }
    }
    assert!(ok >= 19, "only {ok}/20 perturbations recovered");
}

#[test]
fn propagation_onto_itself_is_exact() {
    let g = Geometry::isotropic(40, 1.1).unwrap();
    let (x, l) = generate_phantom(&PhantomParams::new(25.0, 3).with_grid(g)).unwrap();
    let (warped, reg) = propagate_labels(&l, &x, &x, &RegistrationConfig::default()).unwrap();
    assert!(reg.transform.is_identity() || reg.transform.magnitude().1 < 0.05);
    let same = warped.labels().iter().zip(l.labels()).filter(|(a, b)| a == b).count();
    assert!(same as f64 >= 0.999 * l.labels().len() as f64);
}

#[test]
fn propagation_onto_moved_finer_grid() {
    let g = Geometry::isotropic(48, 1.1).unwrap();
    let (x, l) = generate_phantom(&PhantomParams::new(31.0, 8).with_grid(g.clone())).unwrap();
    let truth = RigidTransform::from_degrees([3.0, -2.0, 4.0], [1.5, -2.0, 1.0]);
    let fine = g.resampled_isotropic(0.8).unwrap();
    let moved = resample_transformed(&x, &truth, &fine, Interpolation::Linear);
    let expected = warp_labels(&l, &truth, &fine);
    let (warped, _) = propagate_labels(&l, &x, &moved, &RegistrationConfig::default()).unwrap();
    assert_eq!(warped.geometry(), &fine);
    let wm = dice(&warped, &expected, 3).unwrap();
    assert!(wm >= 0.9, "white matter Dice {wm}");
    let (a, b) = (warped.foreground_count() as f64, expected.foreground_count() as f64);
    assert!((a - b).abs() <= 0.15 * b);
}

#[test]
fn disjoint_fields_of_view_fail() {
    let g = Geometry::isotropic(24, 1.1).unwrap();
    let (x, _) = generate_phantom(&PhantomParams::new(25.0, 1).with_grid(g.clone())).unwrap();
    let far = resample(&x, &g, Interpolation::Linear);
    let shift = RigidTransform::translation([200.0, 0.0, 0.0]);
    let r = register_rigid(&x, &far, &shift, &RegistrationConfig::default());
    assert!(matches!(r, Err(Error::NoOverlap)));
}
