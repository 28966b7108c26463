//! Metrics against a brute-force rational implementation.

use apifill_core::metrics::{em_at_k, map, mrr, RankedResult};
use num::{BigInt, BigRational, ToPrimitive, Zero};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Precision at every cutoff, recomputed from scratch.
fn brute_ap(cands: &[String], rel: &[String]) -> BigRational {
    let mut sum = BigRational::zero();
    for r in 1..=cands.len() {
        if rel.contains(&cands[r - 1]) {
            let hits = cands[..r].iter().filter(|c| rel.contains(c)).count();
            sum += q(hits as i64, r as i64);
        }
    }
    sum / BigInt::from(rel.len())
}

fn brute_rr(cands: &[String], rel: &[String]) -> BigRational {
    for r in 1..=cands.len() {
        if rel.contains(&cands[r - 1]) {
            return q(1, r as i64);
        }
    }
    BigRational::zero()
}

fn random_list(rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let pool: Vec<String> = (0..15).map(|i| format!("pkg.api{i}")).collect();
    let n = rng.gen_range(0..=10);
    let cands: Vec<String> = pool.choose_multiple(rng, n).cloned().collect();
    let m = rng.gen_range(1..=4);
    let rel: Vec<String> = pool.choose_multiple(rng, m).cloned().collect();
    (cands, rel)
}

#[test]
fn matches_brute_force_on_random_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..200 {
        let nq = rng.gen_range(1..=12);
        let lists: Vec<_> = (0..nq).map(|_| random_list(&mut rng)).collect();
        let results: Vec<RankedResult> = lists
            .iter()
            .enumerate()
            .map(|(i, (c, r))| RankedResult::new(i, c, r).unwrap())
            .collect();

        let n = BigInt::from(nq);
        let rr_sum = lists.iter().map(|(c, r)| brute_rr(c, r)).fold(BigRational::zero(), |a, b| a + b);
        let ap_sum = lists.iter().map(|(c, r)| brute_ap(c, r)).fold(BigRational::zero(), |a, b| a + b);
        assert_eq!(mrr(&results).unwrap(), (rr_sum / n.clone()).to_f64().unwrap(), "trial {trial}");
        assert_eq!(map(&results).unwrap(), (ap_sum / n).to_f64().unwrap(), "trial {trial}");
        for k in 1..=5 {
            let hits = lists.iter().filter(|(c, r)| c.iter().take(k).any(|x| r.contains(x))).count();
            let expect = q(100 * hits as i64, nq as i64).to_f64().unwrap();
            assert_eq!(em_at_k(&results, k).unwrap(), expect);
        }
    }
}

proptest! {
    #[test]
    fn invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nq = rng.gen_range(1..=10);
        let lists: Vec<_> = (0..nq).map(|_| random_list(&mut rng)).collect();
        let results: Vec<RankedResult> = lists.iter().enumerate()
            .map(|(i, (c, r))| RankedResult::new(i, c, r).unwrap()).collect();
        let (m, a) = (mrr(&results).unwrap(), map(&results).unwrap());
        prop_assert!((0.0..=1.0).contains(&m) && (0.0..=1.0).contains(&a));

        let em: Vec<f64> = (1..=5).map(|k| em_at_k(&results, k).unwrap()).collect();
        prop_assert!(em.windows(2).all(|w| w[0] <= w[1]));

        let mut shuffled = results.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(mrr(&shuffled).unwrap(), m);
        prop_assert_eq!(map(&shuffled).unwrap(), a);

        // Appending non-relevant candidates after the last hit changes nothing.
        let padded: Vec<RankedResult> = results.iter().map(|r| {
            let mut c = r.candidates.clone();
            c.push("zz.never.relevant".into());
            RankedResult::new(r.query_id, &c, &r.relevant).unwrap()
        }).collect();
        prop_assert_eq!(mrr(&padded).unwrap(), m);
        prop_assert_eq!(map(&padded).unwrap(), a);
        for k in 1..=5 {
            prop_assert_eq!(em_at_k(&padded, k).unwrap(), em[k - 1]);
        }

        // Singleton relevance: MAP and MRR coincide bit for bit.
        let single: Vec<RankedResult> = results.iter().map(|r| {
            RankedResult::new(r.query_id, &r.candidates, &r.relevant[..1]).unwrap()
        }).collect();
        prop_assert_eq!(map(&single).unwrap().to_bits(), mrr(&single).unwrap().to_bits());
    }
}
