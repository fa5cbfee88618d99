mod common;

use std::collections::HashMap;

use faircot_core::analysis::confusion;
use faircot_core::embedding::EmbeddingVector;
use faircot_core::metrics::{kid, mmd2_rbf, normalized_entropy, CategoricalDistribution};
use faircot_core::predictor::{classify_zero_shot, predict_religion, PromptEmbeddings};
use faircot_core::schema::AttributeSchema;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

#[test]
fn entropy_golden_values() {
    let h = |c: &[u64]| {
        let cats: Vec<String> = (0..c.len()).map(|i| format!("c{i}")).collect();
        normalized_entropy(&CategoricalDistribution::from_counts(&cats, c)).unwrap()
    };
    assert_eq!(h(&[5, 5, 5, 5]), 1.0);
    assert_eq!(h(&[7, 0, 0]), 0.0);
    assert!((h(&[18, 2]) - ENTROPY_18_2).abs() < 1e-12);
    if let Some(py) = python_entropy(&[18, 2]) {
        assert!((py - ENTROPY_18_2).abs() < 1e-15, "committed constant drifted: {py}");
    }
}

#[test]
fn entropy_matches_textbook_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let k = rng.gen_range(2..7);
        let counts: Vec<u64> = (0..k).map(|_| rng.gen_range(0..40)).collect();
        if counts.iter().sum::<u64>() == 0 {
            continue;
        }
        let cats: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let got = normalized_entropy(&CategoricalDistribution::from_counts(&cats, &counts)).unwrap();
        assert!((got - entropy_oracle(&counts)).abs() < 1e-12, "{counts:?}");
    }
}

#[test]
fn kernel_estimators_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(m, n) in &[(2, 2), (3, 7), (50, 40), (200, 150), (500, 500)] {
        let x = random_set(&mut rng, m, 16);
        let y = random_set(&mut rng, n, 16);
        let bw = 0.9;
        let got = mmd2_rbf(&x, &y, bw).unwrap();
        let want = brute_mmd2_rbf(&x, &y, bw);
        assert!((got - want).abs() <= 1e-9, "mmd2 m={m} n={n}: {got} vs {want}");
        let got = kid(&x, &y).unwrap();
        let want = brute_kid(&x, &y);
        assert!((got - want).abs() <= 1e-9, "kid m={m} n={n}: {got} vs {want}");
    }
}

#[test]
fn kernel_self_comparison_is_small_and_non_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &n in &[2usize, 10, 100, 500] {
        let x = random_set(&mut rng, n, 16);
        for value in [mmd2_rbf(&x, &x, 1.0).unwrap(), kid(&x, &x).unwrap()] {
            assert!(value <= 0.0, "n={n}: {value}");
            assert!(value.abs() <= 2.0 / n as f64, "n={n}: {value}");
        }
    }
}

fn random_prompts(rng: &mut ChaCha8Rng, schema: &AttributeSchema, dim: usize) -> PromptEmbeddings {
    schema
        .all_prompt_texts()
        .into_iter()
        .map(|t| (t, random_unit(rng, dim)))
        .collect()
}

fn categories_of(
    names: &[String],
    prompts_of: impl Fn(&str) -> Vec<String>,
    table: &PromptEmbeddings,
) -> Vec<(String, Vec<Vec<f64>>)> {
    names
        .iter()
        .map(|c| {
            let vectors = prompts_of(c)
                .iter()
                .map(|p| table.get(p).unwrap().as_slice().to_vec())
                .collect();
            (c.clone(), vectors)
        })
        .collect()
}

#[test]
fn predictor_matches_brute_force_argmax() {
    let schema = AttributeSchema::default();
    let dim = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let prompts = random_prompts(&mut rng, &schema, dim);
    let religion_names: Vec<String> = schema.religion_attire.keys().cloned().collect();
    let religion = categories_of(&religion_names, |c| schema.religion_attire[c].clone(), &prompts);
    for _ in 0..1000 {
        let image = random_unit(&mut rng, dim);
        for attribute in &schema.attributes {
            let cats = categories_of(&attribute.categories, |c| attribute.prompts[c].clone(), &prompts);
            let got = classify_zero_shot(&image, attribute, &prompts).unwrap();
            assert_eq!(got.category, brute_classify(image.as_slice(), &cats));
        }
        let got = predict_religion(&image, schema.attire_in_order(), &prompts).unwrap();
        assert_eq!(got.category, brute_classify(image.as_slice(), &religion));
    }
}

#[test]
fn ties_go_to_the_first_category() {
    let schema = AttributeSchema::default();
    let gender = schema.attribute("gender").unwrap();
    let v = EmbeddingVector::normalize(vec![1.0, 1.0, 0.0]).unwrap();
    let mut prompts = PromptEmbeddings::new();
    for c in &gender.categories {
        for p in &gender.prompts[c] {
            prompts.insert(p.clone(), v.clone());
        }
    }
    let image = EmbeddingVector::normalize(vec![1.0, 0.0, 0.0]).unwrap();
    let got = classify_zero_shot(&image, gender, &prompts).unwrap();
    assert_eq!(got.category, gender.categories[0]);

    let mut attire = PromptEmbeddings::new();
    for p in schema.religion_attire.values().flatten() {
        attire.insert(p.clone(), v.clone());
    }
    let got = predict_religion(&image, schema.attire_in_order(), &attire).unwrap();
    assert_eq!(&got.category, schema.religion_attire.keys().next().unwrap());
}

#[test]
fn confusion_matches_tally_oracle() {
    let cats = ["a", "b", "c", "d"];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.gen_range(0..200);
        let pred: Vec<&str> = (0..n).map(|_| cats[rng.gen_range(0..4)]).collect();
        let gold: Vec<&str> = (0..n).map(|_| cats[rng.gen_range(0..4)]).collect();
        let mut tally: HashMap<(&str, &str), u64> = HashMap::new();
        for (p, g) in pred.iter().zip(&gold) {
            *tally.entry((g, p)).or_default() += 1;
        }
        let cm = confusion(&pred, &gold, &cats).unwrap();
        for (i, g) in cats.iter().enumerate() {
            for (j, p) in cats.iter().enumerate() {
                assert_eq!(cm.counts[i][j], tally.get(&(*g, *p)).copied().unwrap_or(0));
            }
        }
    }
}
