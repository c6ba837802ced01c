use proptest::prelude::*;
use sheat_core::stats::{reduce_blocks, EnsembleMoments, Functional, MomentEstimate, Sample};

const F: Functional = Functional::SupNorm { p: 2.0 };

fn shard(values: &[f64]) -> EnsembleMoments {
    let mut e = MomentEstimate::new(F, 0.5).unwrap();
    for &v in values {
        e.push(Sample::from_value(v));
    }
    EnsembleMoments { estimates: vec![e] }
}

proptest! {
    // Any split into contiguous shards reduces to the single-pass estimate.
    #[test]
    fn sharding_does_not_change_moments(
        values in prop::collection::vec(1e-3f64..1e3, 2..400),
        cuts in prop::collection::vec(0usize..400, 0..12),
    ) {
        let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c % values.len()).collect();
        cuts.push(0);
        cuts.push(values.len());
        cuts.sort_unstable();
        cuts.dedup();
        let parts: Vec<EnsembleMoments> = cuts.windows(2).map(|w| shard(&values[w[0]..w[1]])).collect();
        let merged = reduce_blocks(&parts).unwrap().unwrap();
        let whole = shard(&values);
        let (a, b) = (&merged.estimates[0], &whole.estimates[0]);
        prop_assert_eq!(a.n(), b.n());
        prop_assert!((a.mean() - b.mean()).abs() <= 1e-12 * b.mean());
        prop_assert!((a.variance() - b.variance()).abs() <= 1e-9 * (b.variance() + b.mean() * b.mean()));
        prop_assert!((a.log_mean() - b.log_mean()).abs() <= 1e-12 * (1.0 + b.log_mean().abs()));
    }
}
