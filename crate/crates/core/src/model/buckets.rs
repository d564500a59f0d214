//! Relative-position bucketing for attention bias.

use std::rc::Rc;

/// Bucket of `relative_position = key_pos - query_pos`.
///
/// Bidirectional buckets split the range between negative and positive
/// offsets; causal buckets only distinguish how far back the key lies.
/// Offsets below half the (per-direction) bucket count get their own bucket,
/// larger ones are spaced logarithmically up to `max_distance` and clipped.
/// The logarithm runs in single precision so bucket edges agree with the
/// reference T5 implementation.
pub fn relative_position_bucket(
    relative_position: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut buckets = num_buckets;
    let mut ret = 0usize;
    let n: u64 = if bidirectional {
        buckets /= 2;
        if relative_position > 0 {
            ret += buckets;
        }
        relative_position.unsigned_abs()
    } else {
        (-relative_position.min(0)) as u64
    };
    let max_exact = buckets / 2;
    if (n as usize) < max_exact {
        return ret + n as usize;
    }
    let scale = ((max_distance as f64) / (max_exact as f64)).ln() as f32;
    let large =
        ((n as f32 / max_exact as f32).ln() / scale * (buckets - max_exact) as f32) as usize;
    ret + (max_exact + large).min(buckets - 1)
}

/// Buckets for every (query, key) pair of one attention call, row-major.
#[derive(Debug, Clone)]
pub struct BucketMatrix(pub Rc<Vec<usize>>);

impl BucketMatrix {
    pub fn new(
        queries: usize,
        keys: usize,
        bidirectional: bool,
        num_buckets: usize,
        max_distance: usize,
    ) -> Self {
        let mut out = Vec::with_capacity(queries * keys);
        for q in 0..queries {
            for k in 0..keys {
                out.push(relative_position_bucket(
                    k as i64 - q as i64,
                    bidirectional,
                    num_buckets,
                    max_distance,
                ));
            }
        }
        BucketMatrix(Rc::new(out))
    }
}
