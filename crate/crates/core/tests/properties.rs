use nalgebra::{Point2, Point3, Vector2, Vector3};
use proptest::prelude::*;

use chiefray::blobfield::fit_ellipse;
use chiefray::calibrate::{refine_lm, zhang_closed_form, LmSettings, PlanarView};
use chiefray::chief::fit_circle;
use chiefray::geometry::{
    estimate_homography, project, unproject_ray, Intrinsics, PixelPoint, RigidPose,
};
use chiefray::graycode::{
    decode_stack, gray_decode, gray_encode, render_frame, DecodeThresholds, Decoded, DecodedMap,
    InvalidReason, StackLayout,
};
use chiefray::optics::PlaneId;
use chiefray::raster::{read_pgm_from, write_pgm_to, ScanImage};

fn intrinsics() -> impl Strategy<Value = Intrinsics> {
    (
        500.0..3000.0f64,
        0.9..1.1f64,
        100.0..900.0f64,
        100.0..900.0f64,
    )
        .prop_map(|(fx, ar, cx, cy)| Intrinsics::new(fx, fx * ar, cx, cy).unwrap())
}

fn pose() -> impl Strategy<Value = RigidPose> {
    (
        prop::array::uniform3(-0.6..0.6f64),
        prop::array::uniform2(-100.0..100.0f64),
        200.0..1500.0f64,
    )
        .prop_map(|(r, t, z)| {
            RigidPose::from_axis_angle(&Vector3::from(r), Vector3::new(t[0], t[1], z))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn project_unproject_round_trip(
        k in intrinsics(), p in pose(),
        u in 0.0..800.0f64, v in 0.0..800.0f64, depth in 50.0..5000.0f64,
    ) {
        let px = PixelPoint::new(u, v);
        let (o, dir) = unproject_ray(&k, &p.inverse(), px).unwrap();
        let world = o + dir.into_inner() * depth;
        let back = project(&k, &p.inverse(), &world).unwrap();
        prop_assert!(back.distance(&px) < 1e-9, "{back:?} vs {px:?}");
    }

    #[test]
    fn homography_is_exact_on_clean_points(k in intrinsics(), p in pose(), x in 0.0..60.0f64, y in 0.0..60.0f64) {
        let grid: Vec<_> = (0..5)
            .flat_map(|r| (0..6).map(move |c| Point2::new(c as f64 * 12.0, r as f64 * 12.0)))
            .collect();
        let pairs: Vec<_> = grid
            .iter()
            .map(|q| (*q, project(&k, &p, &Point3::new(q.x, q.y, 0.0)).unwrap()))
            .collect();
        let (h, err) = estimate_homography(&pairs).unwrap();
        prop_assert!(err < 1e-8, "transfer error {err}");
        let expect = project(&k, &p, &Point3::new(x, y, 0.0)).unwrap();
        let got = h.apply(&Vector2::new(x, y));
        prop_assert!((got - expect.to_vector()).norm() < 1e-7);
    }

    #[test]
    fn pose_json_round_trip(p in pose()) {
        let text = serde_json::to_string(&p).unwrap();
        let back: RigidPose = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn gray_round_trip_and_adjacency(n in 0u32..(1 << 24)) {
        prop_assert_eq!(gray_decode(gray_encode(n)), n);
        prop_assert_eq!((gray_encode(n) ^ gray_encode(n + 1)).count_ones(), 1);
    }

    #[test]
    fn complement_frames_are_dual(w in 1u32..300, h in 1u32..300, u in 0u32..300, v in 0u32..300) {
        let layout = StackLayout::new(w, h).unwrap();
        let (u, v) = (u % w, v % h);
        for k in 0..layout.bit_pairs() {
            prop_assert_ne!(layout.pixel_lit(2 * k, u, v), layout.pixel_lit(2 * k + 1, u, v));
        }
        let n = layout.frame_count();
        prop_assert!(layout.pixel_lit(n - 2, u, v));
        prop_assert!(!layout.pixel_lit(n - 1, u, v));
    }

    #[test]
    fn dmap_round_trip(
        w in 1u32..40, h in 1u32..40,
        cells in prop::collection::vec((0u8..3, 0u32..5000, 0u32..5000), 1600),
    ) {
        let entries = cells[..(w * h) as usize]
            .iter()
            .map(|&(tag, u, v)| match tag {
                0 => Decoded::Valid { u, v },
                1 => Decoded::Invalid(InvalidReason::LowContrast),
                _ => Decoded::Invalid(InvalidReason::InconsistentBit),
            })
            .collect();
        let map = DecodedMap { width: w, height: h, entries };
        prop_assert_eq!(DecodedMap::from_bytes(&map.to_bytes()).unwrap(), map);
    }

    #[test]
    fn pgm_round_trip(w in 1u32..30, h in 1u32..30, wide in any::<bool>(), raw in prop::collection::vec(any::<u16>(), 900)) {
        let maxval: u16 = if wide { 65535 } else { 255 };
        let data = raw[..(w * h) as usize].iter().map(|&x| (x as u32 % (maxval as u32 + 1)) as f32).collect();
        let img = ScanImage::from_data(w, h, data).unwrap();
        let mut buf = Vec::new();
        write_pgm_to(&mut buf, &img, maxval).unwrap();
        let back = read_pgm_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn circle_fit_is_exact_and_idempotent(
        cx in -500.0..500.0f64, cy in -500.0..500.0f64, r in 2.0..200.0f64,
        start in 0.0..std::f64::consts::TAU, span in 1.5..std::f64::consts::TAU, n in 8usize..60,
    ) {
        let pts: Vec<_> = (0..n)
            .map(|i| {
                let t = start + span * i as f64 / n as f64;
                (Vector2::new(cx + r * t.cos(), cy + r * t.sin()), 1.0 + (i % 3) as f64)
            })
            .collect();
        let c = fit_circle(&pts).unwrap();
        prop_assert!((c.center - Vector2::new(cx, cy)).norm() < 1e-6 * r.max(1.0));
        prop_assert!((c.radius - r).abs() < 1e-6 * r.max(1.0));
        prop_assert!(c.rms < 1e-6);
        let again: Vec<_> = pts
            .iter()
            .map(|(p, w)| {
                let d = (p - c.center).normalize();
                (c.center + d * c.radius, *w)
            })
            .collect();
        let c2 = fit_circle(&again).unwrap();
        prop_assert!((c2.center - c.center).norm() < 1e-9 * r.max(1.0));
        prop_assert!((c2.radius - c.radius).abs() < 1e-9 * r.max(1.0));
    }

    #[test]
    fn ellipse_fit_is_exact(
        cx in -200.0..200.0f64, cy in -200.0..200.0f64,
        a in 5.0..80.0f64, ratio in 0.3..0.95f64, angle in 0.0..std::f64::consts::PI,
    ) {
        let b = a * ratio;
        let pts: Vec<_> = (0..40)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 40.0;
                let (x, y) = (a * t.cos(), b * t.sin());
                Vector2::new(cx + x * angle.cos() - y * angle.sin(), cy + x * angle.sin() + y * angle.cos())
            })
            .collect();
        let e = fit_ellipse(&pts).unwrap();
        prop_assert!((e.center[0] - cx).abs() < 1e-6 && (e.center[1] - cy).abs() < 1e-6);
        prop_assert!((e.a - a).abs() < 1e-6 * a && (e.b - b).abs() < 1e-6 * a, "{e:?}");
        let d = (e.angle - angle).rem_euclid(std::f64::consts::PI);
        prop_assert!(d.min(std::f64::consts::PI - d) < 1e-5, "{e:?}");
    }
}

fn views(k: &Intrinsics, poses: &[RigidPose], scale: f64) -> Vec<PlanarView> {
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let pairs = (0..8)
                .flat_map(|r| (0..10).map(move |c| (c as f64 * 10.0, r as f64 * 10.0)))
                .map(|(x, y)| {
                    let img = project(k, p, &Point3::new(x, y, 0.0)).unwrap();
                    (Point2::new(x * scale, y * scale), img)
                })
                .collect();
            PlanarView {
                plane: if i == 0 {
                    PlaneId::Scanner
                } else {
                    PlaneId::Mask(i as u32 - 1)
                },
                pairs,
                sets: Vec::new(),
            }
        })
        .collect()
}

fn tilted_poses() -> impl Strategy<Value = Vec<RigidPose>> {
    (
        prop::array::uniform3(-5.0..5.0f64),
        prop::array::uniform3(300.0..600.0f64),
    )
        .prop_map(|(jit, z)| {
            vec![
                RigidPose::from_euler_deg(jit[0], 40.0, 0.0, Vector3::new(-40.0, -30.0, z[0])),
                RigidPose::from_euler_deg(-25.0, jit[1], 0.0, Vector3::new(-60.0, -40.0, z[1])),
                RigidPose::from_euler_deg(25.0, -15.0, jit[2], Vector3::new(10.0, -40.0, z[2])),
            ]
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Expressing the planes in another length unit leaves K unchanged.
    #[test]
    fn zhang_recovers_k_at_any_plane_scale(k in intrinsics(), poses in tilted_poses(), scale in 0.01..100.0f64) {
        let (k1, _) = zhang_closed_form(&views(&k, &poses, 1.0)).unwrap();
        let (k2, _) = zhang_closed_form(&views(&k, &poses, scale)).unwrap();
        for (a, b, truth) in [(k1.fx, k2.fx, k.fx), (k1.fy, k2.fy, k.fy), (k1.cx, k2.cx, k.cx), (k1.cy, k2.cy, k.cy)] {
            prop_assert!((a - truth).abs() < 1e-5 * k.fx, "{k1:?} vs {k:?}");
            prop_assert!((a - b).abs() < 1e-5 * k.fx, "{k1:?} vs {k2:?}");
        }
    }

    #[test]
    fn lm_never_increases_cost(k in intrinsics(), poses in tilted_poses(), bump in prop::array::uniform4(-0.03..0.03f64)) {
        let v = views(&k, &poses, 1.0);
        let start = Intrinsics::new(
            k.fx * (1.0 + bump[0]),
            k.fy * (1.0 + bump[1]),
            k.cx + 100.0 * bump[2],
            k.cy + 100.0 * bump[3],
        )
        .unwrap();
        let poses0: Vec<_> = poses.iter().map(|p| p.perturbed(&Vector3::new(0.01, -0.01, 0.005), &Vector3::new(1.0, -1.0, 2.0))).collect();
        let out = refine_lm(start, poses0, &v, &LmSettings::default()).unwrap();
        let hist = &out.lm.cost_history;
        prop_assert!(hist.windows(2).all(|w| w[1] <= w[0]), "{hist:?}");
        prop_assert!(out.lm.cost <= out.lm.initial_cost);
        prop_assert!(out.mrpe < 1e-6, "mrpe {}", out.mrpe);
        prop_assert!((out.k.fx - k.fx).abs() < 1e-6 * k.fx);
    }

    #[test]
    fn composed_rotations_stay_orthonormal(steps in prop::collection::vec(prop::array::uniform3(-3.2..3.2f64), 10_000)) {
        let mut acc = RigidPose::identity();
        for s in &steps {
            acc = acc.compose(&RigidPose::from_axis_angle(&Vector3::from(*s), Vector3::new(s[1], s[2], s[0])));
        }
        prop_assert!(acc.orthonormality_error() < 1e-9, "{}", acc.orthonormality_error());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Scans of a small panel with uneven per-pixel gain and ambient light:
    /// every valid pixel decodes to its own code, and tightening either
    /// threshold never adds valid pixels.
    #[test]
    fn decode_validity_is_monotone_in_thresholds(
        w in 2u32..40, h in 2u32..40,
        gains in prop::collection::vec((0.0..1.0f32, 0.0..0.2f32, -0.1..0.1f32), 1600),
        t in prop::array::uniform2(0.0..0.5f64),
        dt in prop::array::uniform2(0.0..0.4f64),
    ) {
        let layout = StackLayout::new(w, h).unwrap();
        let scans: Vec<ScanImage> = (0..layout.frame_count())
            .map(|i| {
                let frame = render_frame(&layout, i);
                let data = frame
                    .pixels
                    .iter()
                    .zip(&gains)
                    .enumerate()
                    .map(|(j, (&lit, &(g, amb, wobble)))| {
                        let flip = if i % 3 == j % 3 { wobble } else { 0.0 };
                        (amb + g * (lit as f32 + flip)).max(0.0)
                    })
                    .collect();
                ScanImage::from_data(w, h, data).unwrap()
            })
            .collect();
        let loose = DecodeThresholds { contrast: t[0], bit: t[1] };
        let tight = DecodeThresholds { contrast: t[0] + dt[0], bit: t[1] + dt[1] };
        let a = decode_stack(&layout, &scans, &loose).unwrap();
        let b = decode_stack(&layout, &scans, &tight).unwrap();
        for (i, (ea, eb)) in a.entries.iter().zip(&b.entries).enumerate() {
            if let Decoded::Valid { u, v } = *eb {
                prop_assert_eq!(*ea, Decoded::Valid { u, v });
            }
            if let Decoded::Valid { u, v } = *ea {
                prop_assert_eq!((u, v), (i as u32 % w, i as u32 / w));
            }
        }
        prop_assert!(b.valid_count() <= a.valid_count());
    }
}
