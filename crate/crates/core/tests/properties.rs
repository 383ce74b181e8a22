use proptest::prelude::*;

use cloc::evaluation::{pose_error, threshold_accuracy, PoseError, ThresholdBin};
use cloc::model::{gem_pool, l2_normalize, Descriptor};
use cloc::numerics::Tensor;
use cloc::retrieval::{resize_bilinear, DescriptorIndex, IndexEntry};
use cloc::synthworld::CameraPose;

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-6).then(|| v.iter().map(|x| x / n).collect())
}

proptest! {
    #[test]
    fn gem_lies_between_mean_and_max(values in prop::collection::vec(0.0f64..5.0, 12), p in 1.0f64..20.0) {
        let x = Tensor::new(vec![3, 2, 2], values.clone()).unwrap();
        let pooled = gem_pool(&x, p).unwrap();
        for k in 0..2 {
            let col: Vec<f64> = (0..6).map(|i| values[i * 2 + k]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let max = col.iter().cloned().fold(0.0, f64::max);
            prop_assert!(pooled[k] >= mean - 1e-9 && pooled[k] <= max + 1e-9);
        }
    }

    #[test]
    fn gem_is_non_decreasing_in_p(values in prop::collection::vec(0.0f64..5.0, 8), p in 1.0f64..30.0, dp in 0.0f64..10.0) {
        let x = Tensor::new(vec![2, 4, 1], values).unwrap();
        let a = gem_pool(&x, p).unwrap()[0];
        let b = gem_pool(&x, p + dp).unwrap()[0];
        prop_assert!(b >= a - 1e-9 * a.max(1.0));
    }

    #[test]
    fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-10.0f64..10.0, 1..40)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let d = l2_normalize(&v).unwrap();
        let n = d.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_error_is_symmetric_and_zero_on_self(
        q1 in prop::array::uniform4(-1.0f64..1.0), t1 in prop::array::uniform3(-50.0f64..50.0),
        q2 in prop::array::uniform4(-1.0f64..1.0), t2 in prop::array::uniform3(-50.0f64..50.0),
    ) {
        let (Ok(a), Ok(b)) = (CameraPose::new(q1, t1), CameraPose::new(q2, t2)) else {
            return Ok(());
        };
        let ab = pose_error(&a, &b).unwrap();
        let ba = pose_error(&b, &a).unwrap();
        prop_assert!((ab.translation_m - ba.translation_m).abs() < 1e-9);
        prop_assert!((ab.rotation_deg - ba.rotation_deg).abs() < 1e-6);
        prop_assert!(ab.rotation_deg >= 0.0 && ab.rotation_deg <= 180.0 + 1e-9);
        let aa = pose_error(&a, &a).unwrap();
        prop_assert!(aa.translation_m == 0.0 && aa.rotation_deg < 1e-5);
    }

    #[test]
    fn nested_bins_give_monotone_accuracy(errs in prop::collection::vec((0.0f64..20.0, 0.0f64..40.0), 1..50)) {
        let errors: Vec<PoseError> = errs.iter().map(|&(t, r)| PoseError { translation_m: t, rotation_deg: r }).collect();
        let bins = [
            ThresholdBin { t_m: 0.25, r_deg: 2.0 },
            ThresholdBin { t_m: 0.5, r_deg: 5.0 },
            ThresholdBin { t_m: 5.0, r_deg: 10.0 },
        ];
        let acc = threshold_accuracy(&errors, &bins).unwrap();
        prop_assert!(acc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(acc.iter().all(|a| (0.0..=100.0).contains(a)));
    }

    #[test]
    fn topk_is_a_sorted_prefix_of_topk_plus_one(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..30),
        query in prop::collection::vec(-1.0f64..1.0, 4),
        k in 1usize..10,
    ) {
        let Some(query) = unit(&query) else { return Ok(()) };
        let entries: Vec<IndexEntry> = rows
            .iter()
            .filter_map(|r| unit(r))
            .enumerate()
            .map(|(i, v)| IndexEntry {
                image_id: (97 * i as u32) % 101,
                descriptor: Descriptor::from_unit(v).unwrap(),
                pose: CameraPose::identity(),
            })
            .collect();
        prop_assume!(!entries.is_empty());
        let index = DescriptorIndex::from_entries(entries, None).unwrap();
        let small = index.query_topk(&query, k).unwrap();
        let large = index.query_topk(&query, k + 1).unwrap();
        prop_assert_eq!(small.len(), k.min(index.len()));
        prop_assert!(small.windows(2).all(|w| w[0].similarity > w[1].similarity
            || (w[0].similarity == w[1].similarity && w[0].image_id < w[1].image_id)));
        for (a, b) in small.iter().zip(&large) {
            prop_assert_eq!(a.image_id, b.image_id);
        }
    }

    #[test]
    fn resizing_a_constant_image_keeps_it_constant(v in 0.0f64..1.0, h in 8usize..30, w in 8usize..30, nh in 4usize..40, nw in 4usize..40) {
        let img = Tensor::full(&[h, w, 3], v);
        let out = resize_bilinear(&img, nh, nw).unwrap();
        prop_assert_eq!(out.shape(), &[nh, nw, 3]);
        prop_assert!(out.data().iter().all(|x| (x - v).abs() < 1e-12));
    }
}
