//! Tokenization and the fixed 64-bit hash shared by featurization,
//! BM25 indexing and seeded per-item RNG derivation.

/// Split on non-alphanumeric characters, dropping empty segments.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| {
            if lowercase {
                s.to_lowercase()
            } else {
                s.to_string()
            }
        })
        .collect()
}

/// FNV-1a, 64-bit, standard offset basis and prime. Deterministic across
/// runs and platforms, which is what keeps hashed features and per-pair
/// RNG seeds reproducible.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Standard normal sample via Box-Muller on the given RNG.
pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Draw `k` distinct indices from `0..n` by partial Fisher-Yates,
/// preserving the draw order.
pub fn sample_distinct<R: rand::Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot draw {k} distinct from {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for j in 0..k {
        let pick = rng.random_range(j..pool.len());
        pool.swap(j, pick);
    }
    pool.truncate(k);
    pool
}
