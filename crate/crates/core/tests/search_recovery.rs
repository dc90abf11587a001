use std::time::Instant;

use evopde::evolve::{discover, evolve_population, run_search, EvolveConfig, Individual};
use evopde::expr::{canonical_terms, evaluate, parse_expr, random_expr};
use evopde::features::FeatureTable;
use evopde::rng::rng_from_seed;
use rand::Rng as _;

/// Columns drawn like a Burgers snapshot (bounded u, steeper u_x), with the
/// exact right-hand side as target.
fn burgers_table(rows: usize, seed: u64) -> FeatureTable {
    let mut rng = rng_from_seed(seed);
    let names: Vec<String> = ["u", "u_x", "u_xx", "u_xxx"].iter().map(|s| s.to_string()).collect();
    let scale = [1.0, 2.0, 5.0, 20.0];
    let cols: Vec<Vec<f64>> = scale
        .iter()
        .map(|s| (0..rows).map(|_| s * rng.random_range(-1.0..1.0)).collect())
        .collect();
    let probe = FeatureTable::new(names.clone(), cols.clone(), "u_t", vec![0.0; rows]).unwrap();
    let y = evaluate(&parse_expr("-1*u*u_x + 0.1*u_xx").unwrap(), &probe).unwrap();
    FeatureTable::new(names, cols, "u_t", y).unwrap()
}

#[test]
fn desk_search_recovers_burgers_terms() {
    let table = burgers_table(3000, 1);
    for seed in 0..3 {
        let cfg = EvolveConfig {
            seed,
            ..Default::default()
        };
        let start = Instant::now();
        let found = discover(&table, &cfg).unwrap();
        println!("seed {seed}: {:.1}s, {} optimizations", start.elapsed().as_secs_f64(), found.search.evaluations);
        for m in &found.front {
            println!("  {:>2} {:.3e} {:.4} {}", m.complexity, m.loss, m.score, m.expr);
        }
        // An exact -1 coefficient simplifies to a subtraction, so the true
        // model may sit at complexity 7 instead of 9.
        let hit = found
            .front
            .iter()
            .find(|m| canonical_terms(&m.expr).monomials() == ["u_xx", "u*u_x"])
            .expect("front contains the Burgers terms");
        assert!(hit.complexity <= 9);
        assert_eq!(found.model().expr, hit.expr);
        let terms = canonical_terms(&hit.expr);
        let c1 = terms.coefficient(&["u".into(), "u_x".into()]).unwrap();
        let c2 = terms.coefficient(&["u_xx".into()]).unwrap();
        assert!((c1 + 1.0).abs() <= 0.02 && (c2 - 0.1).abs() <= 0.002, "{c1} {c2}");
    }
}

#[test]
fn generations_reduce_loss() {
    let table = burgers_table(1000, 2);
    let names = table.names().to_vec();
    for seed in 0..3 {
        let cfg = EvolveConfig {
            seed,
            ..Default::default()
        };
        let mut rng = rng_from_seed(seed);
        let mut pop: Vec<Individual> = (0..200)
            .map(|_| {
                let e = random_expr(3, &names, &mut rng);
                evopde::evolve::fitness(&e, &table, cfg.lambda).unwrap()
            })
            .collect();
        let mut losses: Vec<f64> = pop.iter().map(|i| i.loss).collect();
        losses.sort_by(f64::total_cmp);
        let median0 = losses[losses.len() / 2];
        for _ in 0..50 {
            pop = evolve_population(pop, &table, &cfg, &mut rng);
        }
        let best = pop.iter().map(|i| i.loss).fold(f64::INFINITY, f64::min);
        assert!(best * 10.0 <= median0, "seed {seed}: {best} vs {median0}");
    }
}

#[test]
fn hall_of_fame_dominates_everything_evaluated() {
    let table = burgers_table(400, 3);
    let cfg = EvolveConfig {
        populations: 3,
        pop_size: 50,
        iterations: 10,
        seed: 4,
        ..Default::default()
    };
    let r = run_search(&table, &cfg).unwrap();
    for (c, best) in &r.audit {
        assert!(r.hall_of_fame.get(*c).unwrap().loss <= *best);
    }
}
