use dmcvr::phantom::{downsample_stack, generate_phantom, kept_indices, PhantomParams};
use dmcvr::volume::{Class, Volume};
use proptest::prelude::*;

fn lvc_boundary_touches_lvm(lab: &ndarray::ArrayView2<'_, u8>) -> bool {
    let (h, w) = lab.dim();
    let at = |i: isize, j: isize| -> Option<u8> {
        (i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w).then(|| lab[[i as usize, j as usize]])
    };
    for i in 0..h as isize {
        for j in 0..w as isize {
            if at(i, j) != Some(Class::Lvc as u8) {
                continue;
            }
            let on_boundary = [(0, 1), (1, 0), (0, -1), (-1, 0)]
                .iter()
                .any(|(di, dj)| at(i + di, j + dj) != Some(Class::Lvc as u8));
            if !on_boundary {
                continue;
            }
            let mut touches = false;
            for di in -1..=1 {
                for dj in -1..=1 {
                    touches |= at(i + di, j + dj) == Some(Class::Lvm as u8);
                }
            }
            if !touches {
                return false;
            }
        }
    }
    true
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn phantoms_are_deterministic(seed in any::<u64>()) {
        let p = PhantomParams::random_case(seed, 32, 12);
        let a: Volume<f32> = generate_phantom(&p).unwrap();
        let b: Volume<f32> = generate_phantom(&p).unwrap();
        prop_assert_eq!(a.data, b.data);
        prop_assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn cavity_boundary_is_wrapped_by_myocardium(seed in any::<u64>()) {
        let p = PhantomParams::random_case(seed, 48, 16);
        let v: Volume<f32> = generate_phantom(&p).unwrap();
        let labels = v.labels.as_ref().unwrap();
        for (k, lab) in labels.axis_iter(ndarray::Axis(0)).enumerate() {
            prop_assert!(lvc_boundary_touches_lvm(&lab), "slice {}", k);
        }
    }

    #[test]
    fn downsampling_selects_slices_verbatim(seed in 0u64..1000, n in 5usize..20, factor in 2usize..5) {
        prop_assume!(factor < n);
        let v: Volume<f64> = generate_phantom(&PhantomParams::random_case(seed, 32, n)).unwrap();
        let s = downsample_stack(&v, factor).unwrap();
        let idx = kept_indices(n, factor);
        prop_assert_eq!(s.len(), idx.len());
        for (k, &i) in idx.iter().enumerate() {
            prop_assert_eq!(&s.slices[k], &v.slice(i).to_owned());
            prop_assert_eq!(s.labels.as_ref().unwrap()[k].as_array(), &v.labels.as_ref().unwrap().index_axis(ndarray::Axis(0), i).to_owned());
            prop_assert_eq!(s.positions[k], v.position(i));
        }
    }
}
