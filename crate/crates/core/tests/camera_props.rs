use std::f64::consts::PI;

use liftrefine::camera::{interpolate_poses, InterpolationMode};
use liftrefine::scene::{orbit_cameras, MAX_ELEVATION_DEG, MIN_ELEVATION_DEG, ORBIT_RADIUS};
use liftrefine::{CameraPose, Intrinsics};
use nalgebra::Matrix3;
use proptest::prelude::*;

fn k() -> Intrinsics {
    Intrinsics::centered(40.0, 32, 32)
}

fn orbit(az: f64, el: f64) -> CameraPose {
    CameraPose::orbit(k(), az, el, ORBIT_RADIUS).unwrap()
}

fn mode() -> impl Strategy<Value = InterpolationMode> {
    prop_oneof![Just(InterpolationMode::Spherical), Just(InterpolationMode::Linear)]
}

fn bits(p: &CameraPose) -> Vec<u64> {
    p.rotation().iter().chain(p.translation().iter()).map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolated_rotations_stay_proper(
        az0 in -PI..PI, az1 in -PI..PI,
        el0 in -1.0f64..1.2, el1 in -1.0f64..1.2,
        n in 1usize..10,
        mode in mode(),
    ) {
        let poses = interpolate_poses(&orbit(az0, el0), &orbit(az1, el1), n, mode).unwrap();
        prop_assert_eq!(poses.len(), n);
        for p in &poses {
            let r = p.rotation();
            let gram = r * r.transpose() - Matrix3::identity();
            prop_assert!(gram.abs().max() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn swapping_endpoints_reverses_the_path(
        // Both azimuths inside one half-turn: the shorter arc never wraps.
        az0 in -1.5f64..1.5, az1 in -1.5f64..1.5,
        el0 in -0.5f64..1.0, el1 in -0.5f64..1.0,
        n in 1usize..10,
    ) {
        let (a, b) = (orbit(az0, el0), orbit(az1, el1));
        let forward = interpolate_poses(&a, &b, n, InterpolationMode::Spherical).unwrap();
        let mut backward = interpolate_poses(&b, &a, n, InterpolationMode::Spherical).unwrap();
        backward.reverse();
        for (f, b) in forward.iter().zip(&backward) {
            prop_assert_eq!(bits(f), bits(b));
        }
    }

    #[test]
    fn pixel_ray_round_trip(
        az in -PI..PI, el in -0.5f64..1.0,
        u in 0.0f64..32.0, v in 0.0f64..32.0,
        depth in 0.1f64..3.0,
    ) {
        let pose = orbit(az, el);
        let ray = pose.pixel_to_ray(u, v);
        prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
        let (pu, pv) = pose.project(&ray.at(depth)).unwrap();
        prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
    }

    #[test]
    fn dataset_cameras_orbit_the_origin(seed in any::<u64>()) {
        for pose in orbit_cameras(seed, 8, 16).unwrap() {
            let (_, el, r) = pose.spherical();
            prop_assert!((r - ORBIT_RADIUS).abs() < 1e-9);
            let el = el.to_degrees();
            prop_assert!((MIN_ELEVATION_DEG - 1e-9..=MAX_ELEVATION_DEG + 1e-9).contains(&el));
            // The principal ray passes through the origin.
            let (u, v) = pose.project(&nalgebra::Vector3::zeros()).unwrap();
            prop_assert!((u - 8.0).abs() < 1e-9 && (v - 8.0).abs() < 1e-9);
        }
    }
}
