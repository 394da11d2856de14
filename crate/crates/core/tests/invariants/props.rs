use std::sync::Arc;

use catmi::cart::{build_tree, gini, CartConfig, CartEngine};
use catmi::chained::{multiple_impute, ChainedConfig};
use catmi::data::{
    enumerate_candidate_estimands, enumerate_estimands, passes_normality_filter, CategoricalDataset, Code, Codebook,
    ProportionEstimate, Variable,
};
use catmi::dpm::{dpm_multiple_impute, stick_weights, DpmConfig, DpmSampler};
use catmi::glm::{fit_multinomial, GlmConfig, GlmEngine};
use catmi::pooling::pool;
use catmi::rng::rng_from_seed;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

fn codebook(levels: &[usize]) -> Arc<Codebook> {
    let vars = levels
        .iter()
        .enumerate()
        .map(|(j, &d)| Variable {
            name: format!("v{j}"),
            levels: (0..d).map(|l| format!("l{l}")).collect(),
        })
        .collect();
    Arc::new(Codebook::new(vars).unwrap())
}

/// Level counts, row-major values and a missingness mask that leaves every
/// column with at least one observed cell.
fn incomplete_data() -> impl Strategy<Value = CategoricalDataset> {
    (prop::collection::vec(2usize..=4, 2..=4), 20usize..=40).prop_flat_map(|(levels, n)| {
        let p = levels.len();
        let cols: Vec<_> = levels.iter().map(|&d| prop::collection::vec(0..d as Code, n)).collect();
        let mask = prop::collection::vec(prop::collection::vec(prop::bool::weighted(0.25), n), p);
        (Just(levels), cols, mask).prop_map(|(levels, cols, mut mask)| {
            for m in mask.iter_mut() {
                m[0] = false;
            }
            CategoricalDataset::new(codebook(&levels), cols, mask).unwrap()
        })
    })
}

fn complete_data() -> impl Strategy<Value = CategoricalDataset> {
    (prop::collection::vec(2usize..=4, 1..=4), 15usize..=60).prop_flat_map(|(levels, n)| {
        let cols: Vec<_> = levels.iter().map(|&d| prop::collection::vec(0..d as Code, n)).collect();
        (Just(levels), cols).prop_map(|(levels, cols)| CategoricalDataset::complete(codebook(&levels), cols).unwrap())
    })
}

fn assert_observed_kept(original: &CategoricalDataset, imputed: &CategoricalDataset) -> Result<(), TestCaseError> {
    prop_assert!(imputed.is_complete());
    for j in 0..original.n_vars() {
        for i in 0..original.n_rows() {
            let v = imputed.get(i, j).unwrap();
            prop_assert!((v as usize) < original.level_counts()[j]);
            if let Some(o) = original.get(i, j) {
                prop_assert_eq!(o, v);
            }
        }
    }
    Ok(())
}

fn small_chained() -> ChainedConfig {
    ChainedConfig {
        cycles: 2,
        imputations: 2,
        ..ChainedConfig::default()
    }
}

pub const CASES: u32 = 100;

fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    TestRunner::new(Config::with_cases(CASES))
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

#[allow(dead_code)]
pub const ALL: &[(&str, fn() -> Result<(), String>)] = &[
    ("stick_weights_sum_to_one", stick_weights_sum_to_one),
    ("dpm_parameters_stay_normalized", dpm_parameters_stay_normalized),
    (
        "glm_predictions_are_probability_rows",
        glm_predictions_are_probability_rows,
    ),
    ("glm_keeps_observed_cells", glm_keeps_observed_cells),
    ("cart_keeps_observed_cells", cart_keeps_observed_cells),
    ("dpm_keeps_observed_cells", dpm_keeps_observed_cells),
    ("gini_is_bounded", gini_is_bounded),
    ("gini_never_increases_after_a_split", gini_never_increases_after_a_split),
    ("every_tree_split_reduces_impurity", every_tree_split_reduces_impurity),
    ("pooling_ignores_imputation_order", pooling_ignores_imputation_order),
    ("estimands_respect_the_filter", estimands_respect_the_filter),
];

pub fn stick_weights_sum_to_one() -> Result<(), String> {
    check(prop::collection::vec(0.0f64..1.0, 1..40), |v| {
        let mut v = v;
        *v.last_mut().unwrap() = 1.0;
        let pi = stick_weights(&v);
        prop_assert!(pi.iter().all(|&p| p >= 0.0));
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        Ok(())
    })
}

pub fn dpm_parameters_stay_normalized() -> Result<(), String> {
    check((incomplete_data(), any::<u64>(), 1usize..8), |(data, seed, k)| {
        let mut rng = rng_from_seed(seed);
        let cfg = DpmConfig {
            k,
            ..DpmConfig::default()
        };
        let mut s = DpmSampler::new(&data, &cfg, &mut rng).unwrap();
        for _ in 0..5 {
            s.step(&mut rng);
            let st = s.state();
            prop_assert!((st.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(st.pi.iter().all(|&p| p >= 0.0));
            for lam in &st.lambda {
                for probs in lam {
                    prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(probs.iter().all(|&p| p >= 0.0));
                }
            }
            prop_assert!(st.alpha > 0.0 && st.alpha.is_finite());
            prop_assert!(st.z.iter().all(|&z| z < k));
        }
        Ok(())
    })
}

pub fn glm_predictions_are_probability_rows() -> Result<(), String> {
    check((complete_data(), any::<u64>()), |(data, seed)| {
        prop_assume!(data.n_vars() >= 2);
        let fill = catmi::chained::initial_impute(&data, &mut rng_from_seed(seed)).unwrap();
        let cols = fill.columns();
        let levels = data.level_counts();
        let rows: Vec<usize> = (0..data.n_rows()).collect();
        let predictors: Vec<usize> = (1..data.n_vars()).collect();
        let present = data.observed_counts(0);
        prop_assume!(present.iter().filter(|&&c| c > 0).count() >= 2);
        let fit = fit_multinomial("v0", cols, 0, &predictors, &levels, &rows, &GlmConfig::default());
        let fit = match fit {
            Ok(f) => f,
            // separable draws are allowed to stop with a typed error
            Err(catmi::error::EngineError::NonConvergence { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        for row in fit.predict(cols, &rows) {
            prop_assert_eq!(row.len(), levels[0]);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for (c, &p) in row.iter().enumerate() {
                prop_assert!(p >= 0.0);
                if present[c] == 0 {
                    prop_assert_eq!(p, 0.0);
                }
            }
        }
        Ok(())
    })
}

pub fn glm_keeps_observed_cells() -> Result<(), String> {
    check((incomplete_data(), any::<u64>()), |(data, seed)| {
        match multiple_impute(&data, &small_chained(), &GlmEngine::default(), seed) {
            Ok(out) => {
                prop_assert_eq!(out.len(), 2);
                for d in &out {
                    assert_observed_kept(&data, d)?;
                }
            }
            Err(catmi::error::Error::Engine(catmi::error::EngineError::NonConvergence { .. })) => {}
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
        Ok(())
    })
}

pub fn cart_keeps_observed_cells() -> Result<(), String> {
    check((incomplete_data(), any::<u64>()), |(data, seed)| {
        let out = multiple_impute(&data, &small_chained(), &CartEngine::default(), seed).unwrap();
        prop_assert_eq!(out.len(), 2);
        for d in &out {
            assert_observed_kept(&data, d)?;
        }
        Ok(())
    })
}

pub fn dpm_keeps_observed_cells() -> Result<(), String> {
    check((incomplete_data(), any::<u64>()), |(data, seed)| {
        let cfg = DpmConfig {
            k: 5,
            iterations: 30,
            burn_in: 10,
            imputations: 2,
            ..DpmConfig::default()
        };
        let run = dpm_multiple_impute(&data, &cfg, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(run.datasets.len(), 2);
        for d in &run.datasets {
            assert_observed_kept(&data, d)?;
        }
        Ok(())
    })
}

pub fn gini_is_bounded() -> Result<(), String> {
    check(prop::collection::vec(0usize..50, 1..8), |counts| {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let g = gini(&counts);
        let c = counts.len() as f64;
        prop_assert!(g >= 0.0 && g <= 1.0 - 1.0 / c + 1e-12);
        Ok(())
    })
}

pub fn gini_never_increases_after_a_split() -> Result<(), String> {
    check(
        (
            prop::collection::vec(0usize..40, 2..6),
            prop::collection::vec(0usize..40, 2..6),
        ),
        |(left, right_seed)| {
            let c = left.len();
            let right: Vec<usize> = (0..c).map(|i| right_seed[i % right_seed.len()]).collect();
            let nl: usize = left.iter().sum();
            let nr: usize = right.iter().sum();
            prop_assume!(nl > 0 && nr > 0);
            let parent: Vec<usize> = left.iter().zip(&right).map(|(a, b)| a + b).collect();
            let n = (nl + nr) as f64;
            let child = (nl as f64 * gini(&left) + nr as f64 * gini(&right)) / n;
            prop_assert!(child <= gini(&parent) + 1e-12);
            Ok(())
        },
    )
}

pub fn every_tree_split_reduces_impurity() -> Result<(), String> {
    check(complete_data(), |data| {
        prop_assume!(data.n_vars() >= 2);
        let levels = data.level_counts();
        let rows: Vec<usize> = (0..data.n_rows()).collect();
        let predictors: Vec<usize> = (1..data.n_vars()).collect();
        let cfg = CartConfig {
            min_leaf: 2,
            ..CartConfig::default()
        };
        let tree = build_tree(data.columns(), &levels, 0, &predictors, &rows, &cfg);
        for (size, parent, child) in tree.split_impurities(data.column(0), levels[0]) {
            prop_assert!(size >= 2 * cfg.min_leaf);
            prop_assert!(child < parent);
        }
        let mut covered: Vec<usize> = tree.leaves().concat();
        covered.sort_unstable();
        prop_assert_eq!(covered, rows.clone());
        for leaf in tree.leaves() {
            prop_assert!(leaf.len() >= cfg.min_leaf);
        }
        Ok(())
    })
}

pub fn pooling_ignores_imputation_order() -> Result<(), String> {
    check(
        (prop::collection::vec(0usize..=200, 2..12), any::<u64>()),
        |(counts, shuffle_seed)| {
            let est: Vec<ProportionEstimate> = counts.iter().map(|&c| ProportionEstimate::from_count(c, 200)).collect();
            let mut shuffled = est.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng_from_seed(shuffle_seed));
            let a = pool(&est, 0.95).unwrap();
            let b = pool(&shuffled, 0.95).unwrap();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0) || (x.is_infinite() && x == y);
            prop_assert!(close(a.q_bar, b.q_bar));
            prop_assert!(close(a.b, b.b));
            prop_assert!(close(a.u_bar, b.u_bar));
            prop_assert!(close(a.t, b.t));
            prop_assert!(close(a.nu, b.nu) || (a.nu > 1e12 && b.nu > 1e12));
            prop_assert!((a.ci_low - b.ci_low).abs() < 1e-9);
            prop_assert!((a.ci_high - b.ci_high).abs() < 1e-9);
            prop_assert_eq!(a.degenerate_b, b.degenerate_b);
            Ok(())
        },
    )
}

pub fn estimands_respect_the_filter() -> Result<(), String> {
    check(
        (complete_data(), 10usize..2000, 1usize..=3),
        |(data, n_sample, order)| {
            let kept = enumerate_estimands(&data, n_sample, order).unwrap();
            let all = enumerate_candidate_estimands(&data, order).unwrap();
            for e in &kept {
                prop_assert!(passes_normality_filter(e.population_value, n_sample));
                let n = n_sample as f64;
                prop_assert!(n * e.population_value > 10.0 && n * (1.0 - e.population_value) > 10.0);
                prop_assert!(e.kind.order() <= order);
            }
            let expected = all
                .iter()
                .filter(|e| passes_normality_filter(e.population_value, n_sample))
                .count();
            prop_assert_eq!(kept.len(), expected);
            Ok(())
        },
    )
}
