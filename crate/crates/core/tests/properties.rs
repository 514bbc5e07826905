use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use tapas_core::actions::{compose, factorize, Driver, Role};
use tapas_core::cascade::reverse_skill;
use tapas_core::gaussian::{regularize, Regularization};
use tapas_core::manifold::{Factor, ManifoldDescriptor};
use tapas_core::mixture::{GmrState, HMMModel};
use tapas_core::pipeline::{train, PipelineConfig};
use tapas_core::quat;
use tapas_core::synth::pick_and_place;
use tapas_core::tpgmm::{driver_input, SkillModel};
use tapas_core::demo::Pose;
use tapas_core::gaussian::RiemannianGaussian;

fn unit(v: Vec<f64>) -> Option<DVector<f64>> {
    let v = DVector::from_vec(v);
    let n = v.norm();
    (n > 1e-3).then(|| v / n)
}

fn vec3() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-1.0..1.0f64).prop_map(Vector3::from)
}

fn rotation() -> impl Strategy<Value = [f64; 4]> {
    (vec3(), -3.0..3.0f64).prop_filter_map("degenerate axis", |(a, t)| (a.norm() > 1e-3).then(|| quat::from_axis_angle(&a, t)))
}

fn spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |v| {
        let a = DMatrix::from_vec(n, n, v);
        &a * a.transpose() + DMatrix::identity(n, n) * 1e-2
    })
}

fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

fn trained() -> &'static SkillModel {
    static SKILL: OnceLock<SkillModel> = OnceLock::new();
    SKILL.get_or_init(|| {
        let (set, _) = pick_and_place().generate().unwrap();
        train(&set, &PipelineConfig::default()).unwrap().task.skills[1].clone()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn quaternion_exp_log_roundtrip(g in prop::collection::vec(-1.0..1.0f64, 4), v in prop::array::uniform3(-1.0..1.0f64)) {
        let m = ManifoldDescriptor::new(vec![Factor::Quaternion]).unwrap();
        let Some(g) = unit(g) else { return Ok(()) };
        let v = DVector::from_row_slice(&v);
        let p = m.exp_map(&g, &v).unwrap();
        prop_assert!((m.log_map(&g, &p).unwrap() - &v).amax() < 1e-9);
    }

    #[test]
    fn transport_preserves_spectrum(g in prop::collection::vec(-1.0..1.0f64, 3), h in prop::collection::vec(-1.0..1.0f64, 3), s in spd(2)) {
        let m = ManifoldDescriptor::new(vec![Factor::Sphere2]).unwrap();
        let (Some(g), Some(h)) = (unit(g), unit(h)) else { return Ok(()) };
        if (&g + &h).norm() < 1e-3 {
            return Ok(());
        }
        let moved = m.parallel_transport(&s, &g, &h).unwrap();
        for (a, b) in sorted_eigenvalues(&s).iter().zip(sorted_eigenvalues(&moved)) {
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn block_decorrelate_zeroes_orientation_cross_terms(s in spd(7)) {
        let m = ManifoldDescriptor::new(vec![Factor::Euclid(1), Factor::Euclid(3), Factor::Quaternion]).unwrap();
        let r = regularize(&s, &m, Regularization::default());
        for i in 4..7 {
            for j in 0..7 {
                if i != j {
                    prop_assert_eq!(r[(i, j)], 0.0);
                    prop_assert_eq!(r[(j, i)], 0.0);
                }
            }
        }
        prop_assert!(sorted_eigenvalues(&r)[0] > 0.0);
        prop_assert!((r.view((0, 0), (4, 4)) - s.view((0, 0), (4, 4))).amax() < 1e-12 || sorted_eigenvalues(&s)[0] < 1e-6);
    }

    #[test]
    fn gmr_weights_form_a_distribution(means in prop::collection::vec(prop::array::uniform2(-2.0..2.0f64), 2..6), x in -3.0..3.0f64) {
        let m = ManifoldDescriptor::new(vec![Factor::Euclid(1), Factor::Euclid(1)]).unwrap();
        let k = means.len();
        let comps = means
            .iter()
            .map(|mu| RiemannianGaussian::new(m.clone(), DVector::from_row_slice(mu), DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2])).unwrap())
            .collect();
        let model = HMMModel::new(m, DVector::from_element(k, 1.0 / k as f64), DMatrix::from_element(k, k, 1.0 / k as f64), comps).unwrap();
        let mut g = GmrState::new(&model, &[0]).unwrap();
        for step in 0..3 {
            let out = g.step(&DVector::from_element(1, x + step as f64 * 0.1)).unwrap();
            prop_assert!(out.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((out.weights.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn factorized_velocity_roundtrip(x in vec3(), q in rotation(), dq in rotation()) {
        let dq = quat::slerp(&quat::IDENTITY, &dq, 0.3);
        let next = quat::mul(&dq, &q);
        let (x2, dq2) = compose(&factorize(&x, &q, &next, None));
        prop_assert!((x2 - x).norm() < 1e-12);
        prop_assert!(quat::dot(&dq2, &dq).abs() > 1.0 - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adaptation_commutes_with_rigid_motion(rot in rotation(), trans in vec3(), t in 0.0..1.0f64) {
        let skill = trained();
        let frames = pick_and_place().sample_frames(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5));
        let moved = frames.iter().map(|(k, f)| (k.clone(), f.transformed(&rot, &trans))).collect();
        let layout = skill.world_layout();
        let (pi, qi) = (layout.index_of(Role::Position(0)).unwrap(), layout.index_of(Role::Orientation(0)).unwrap());
        let input = driver_input(Driver::Time, t, &Pose::new(Vector3::zeros(), quat::IDENTITY));
        let predict = |frames| {
            let model = skill.adapt(frames, Regularization::default()).unwrap();
            let mut g = skill.gmr(&model).unwrap();
            let outs = g.outputs().to_vec();
            let sub = model.manifold.submanifold(&outs).unwrap();
            let mean = g.step(&input).unwrap().gaussian.mean;
            let p = sub.ambient_range(outs.iter().position(|&o| o == pi).unwrap()).start;
            let q = sub.ambient_range(outs.iter().position(|&o| o == qi).unwrap()).start;
            Pose::new(Vector3::new(mean[p], mean[p + 1], mean[p + 2]), [mean[q], mean[q + 1], mean[q + 2], mean[q + 3]])
        };
        let a = predict(&frames);
        let b = predict(&moved);
        let expected = quat::rotate(&rot, &a.pos) + trans;
        prop_assert!((b.pos - expected).norm() < 1e-6, "{} vs {}", b.pos, expected);
        prop_assert!(quat::dot(&b.quat, &quat::mul(&rot, &a.quat)).abs() > 1.0 - 1e-9);
    }
}

#[test]
fn reversing_twice_is_identity() {
    let skill = trained();
    let back = reverse_skill(&reverse_skill(skill).unwrap()).unwrap();
    assert_eq!(back.hmm.priors, skill.hmm.priors);
    assert_eq!(back.hmm.transitions, skill.hmm.transitions);
    for (a, b) in back.hmm.components.iter().zip(&skill.hmm.components) {
        assert!((&a.mean - &b.mean).amax() < 1e-15);
        assert_eq!(a.cov, b.cov);
    }
}
