//! (k, l) threshold RSA signatures: trusted-dealer key generation, share
//! signing with non-interactive correctness proofs, share verification,
//! combination into a unique group signature, and the signature-to-random
//! mapping used by the CT path.
//!
//! The scheme follows Shoup's RSA threshold construction: the modulus is a
//! product of two safe primes, the signing exponent is shared with a random
//! degree-(k-1) polynomial, shares are verifiable through equality-of-
//! discrete-log proofs, and any k valid shares interpolate (in the exponent,
//! scaled by delta = l!) to the same standard RSA signature. Proof nonces are
//! derived deterministically from the share secret and the message, so every
//! operation here is a pure function of its inputs.
//!
//! Key sizes of 64..256 bits are toy parameters for tests and benchmarks;
//! they exercise the same algebra as real sizes without the cost of safe
//! prime generation at 512+ bits. None of this is hardened key material.

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha1::Sha1;
use sha2::{Digest as Sha2Digest, Sha256};
use thiserror::Error;

use crate::entropy::leading_bits_be;

/// Supported modulus sizes in bits.
pub const SUPPORTED_KEY_BITS: [u32; 5] = [64, 128, 256, 512, 1024];

/// Public exponent: prime and larger than any supported player count.
const PUB_EXP: u32 = 65537;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ThresholdError {
    #[error("unsupported key size {0} bits")]
    UnsupportedKeyBits(u32),
    #[error("invalid threshold k={k} for l={l}")]
    BadThreshold { k: u32, l: u32 },
    #[error("need {need} valid signature shares, got {got}")]
    InsufficientShares { got: usize, need: usize },
    #[error("value not invertible modulo N")]
    NotInvertible,
    #[error("combined value failed verification")]
    CombineFailed,
    #[error("unsupported output width {0} bits")]
    UnsupportedWidth(u32),
}

/// Public key material of the threshold group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupKey {
    /// RSA modulus, product of two safe primes.
    pub modulus: BigUint,
    /// Public verification exponent `e`.
    pub pub_exp: BigUint,
    /// Verification base `v`, a generator of the squares mod N.
    pub verif_base: BigUint,
    /// Per-share verification keys `v_i = v^{s_i}`, indexed by holder-1.
    pub verif_keys: Vec<BigUint>,
    pub k: u32,
    pub l: u32,
    pub key_bits: u32,
}

/// One player's share of the signing exponent. Holder ids are 1-indexed
/// because they double as interpolation abscissas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyShare {
    pub holder: u32,
    pub secret: BigUint,
    /// Public group context needed to sign and prove.
    pub group: GroupKey,
}

/// Non-interactive equality-of-discrete-log proof binding a signature share
/// to its verification key and the hashed message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EqLogProof {
    pub challenge: BigUint,
    pub response: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureShare {
    pub holder: u32,
    pub value: BigUint,
    pub proof: EqLogProof,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSignature {
    pub value: BigUint,
}

/// Dealer-side secrets, exposed so tests can cross-check combination against
/// plain RSA signing with the reconstructed exponent.
#[derive(Debug, Clone)]
pub struct DealerState {
    pub p: BigUint,
    pub q: BigUint,
    /// `m = p' q'`, the order of the squares subgroup.
    pub m: BigUint,
    /// Signing exponent `d = e^{-1} mod m`.
    pub d: BigUint,
}

/// Hash used by the signature-to-random mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoinHash {
    /// Historical default for this mapping.
    #[default]
    Sha1,
    Sha256,
}

// ---------------------------------------------------------------------------
// Prime generation
// ---------------------------------------------------------------------------

fn small_primes() -> &'static [u64] {
    // Primes below 1000, enough sieving to make Miller-Rabin cheap.
    static PRIMES: std::sync::OnceLock<Vec<u64>> = std::sync::OnceLock::new();
    PRIMES.get_or_init(|| {
        let mut sieve = vec![true; 1000];
        let mut primes = Vec::new();
        for n in 2..1000usize {
            if sieve[n] {
                primes.push(n as u64);
                let mut m = n * n;
                while m < 1000 {
                    sieve[m] = false;
                    m += n;
                }
            }
        }
        primes
    })
}

fn miller_rabin(n: &BigUint, rounds: u32, rng: &mut ChaCha20Rng) -> bool {
    let one = BigUint::one();
    let two = &one + &one;
    if *n < two {
        return false;
    }
    for p in small_primes() {
        let p = BigUint::from(*p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - &one;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..rounds {
        let a = rand_below(rng, &(n - &two)) + &two;
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 0..s.saturating_sub(1) {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Uniform value in `[0, bound)`. Deterministic for a seeded rng.
fn rand_below(rng: &mut ChaCha20Rng, bound: &BigUint) -> BigUint {
    assert!(!bound.is_zero());
    let bits = bound.bits();
    let bytes = ((bits + 7) / 8) as usize;
    let shift = (8 * bytes as u64) - bits;
    loop {
        let mut buf = vec![0u8; bytes];
        rng.fill_bytes(&mut buf);
        let candidate = BigUint::from_bytes_be(&buf) >> shift;
        if &candidate < bound {
            return candidate;
        }
    }
}

/// Generate a safe prime `p = 2p' + 1` of exactly `bits` bits.
fn gen_safe_prime(bits: u64, rng: &mut ChaCha20Rng) -> BigUint {
    let one = BigUint::one();
    loop {
        // Candidate p' with top two bits set so p lands on the full width.
        let mut p_prime = rand_below(rng, &(BigUint::one() << (bits - 1)));
        p_prime.set_bit(bits - 2, true);
        p_prime.set_bit(bits - 3, true);
        p_prime.set_bit(0, true);
        let p = (&p_prime << 1) + &one;

        let mut sieved = false;
        for sp in small_primes() {
            let sp_big = BigUint::from(*sp);
            if p_prime > sp_big && (&p_prime % sp).is_zero() {
                sieved = true;
                break;
            }
            if p > sp_big && (&p % sp).is_zero() {
                sieved = true;
                break;
            }
        }
        if sieved {
            continue;
        }
        if miller_rabin(&p_prime, 32, rng) && miller_rabin(&p, 32, rng) {
            return p;
        }
    }
}

// ---------------------------------------------------------------------------
// Hashing helpers
// ---------------------------------------------------------------------------

/// Map a message into Z_N, SHA-256 expanded in counter mode and reduced mod N.
fn hash_to_zn(msg: &[u8], n: &BigUint) -> BigUint {
    let need = ((n.bits() + 7) / 8 + 16) as usize;
    let mut out = Vec::with_capacity(need + 32);
    let mut ctr = 0u32;
    while out.len() < need {
        let mut h = Sha256::new();
        h.update(b"randbft-hash-to-zn");
        h.update(ctr.to_be_bytes());
        h.update(msg);
        out.extend_from_slice(&h.finalize());
        ctr += 1;
    }
    let x = BigUint::from_bytes_be(&out[..need]) % n;
    if x.is_zero() {
        BigUint::one()
    } else {
        x
    }
}

fn challenge_hash(parts: &[&BigUint]) -> BigUint {
    let mut h = Sha256::new();
    h.update(b"randbft-eqlog-challenge");
    for p in parts {
        let bytes = p.to_bytes_be();
        h.update((bytes.len() as u32).to_be_bytes());
        h.update(&bytes);
    }
    BigUint::from_bytes_be(&h.finalize())
}

/// Deterministic proof nonce of `n_bits + 512` bits derived from the share
/// secret and the message.
fn proof_nonce(secret: &BigUint, msg: &[u8], n_bits: u64) -> BigUint {
    let need = ((n_bits + 512 + 7) / 8) as usize;
    let secret_bytes = secret.to_bytes_be();
    let mut out = Vec::with_capacity(need + 32);
    let mut ctr = 0u32;
    while out.len() < need {
        let mut h = Sha256::new();
        h.update(b"randbft-proof-nonce");
        h.update(ctr.to_be_bytes());
        h.update((secret_bytes.len() as u32).to_be_bytes());
        h.update(&secret_bytes);
        h.update(msg);
        out.extend_from_slice(&h.finalize());
        ctr += 1;
    }
    BigUint::from_bytes_be(&out[..need])
}

fn factorial(n: u32) -> BigUint {
    let mut out = BigUint::one();
    for i in 2..=n {
        out *= BigUint::from(i);
    }
    out
}

fn modpow_signed(base: &BigUint, exp: &BigInt, n: &BigUint) -> Result<BigUint, ThresholdError> {
    if exp.sign() == Sign::Minus {
        let inv = base.modinv(n).ok_or(ThresholdError::NotInvertible)?;
        Ok(inv.modpow(exp.magnitude(), n))
    } else {
        Ok(base.modpow(exp.magnitude(), n))
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Trusted-dealer key generation. Deterministic for a given seed.
pub fn deal(
    k: u32,
    l: u32,
    key_bits: u32,
    seed: u64,
) -> Result<(GroupKey, Vec<KeyShare>), ThresholdError> {
    let (gk, shares, _) = deal_with_dealer_state(k, l, key_bits, seed)?;
    Ok((gk, shares))
}

/// As [`deal`], additionally returning the dealer's secrets for validation.
pub fn deal_with_dealer_state(
    k: u32,
    l: u32,
    key_bits: u32,
    seed: u64,
) -> Result<(GroupKey, Vec<KeyShare>, DealerState), ThresholdError> {
    if !SUPPORTED_KEY_BITS.contains(&key_bits) {
        return Err(ThresholdError::UnsupportedKeyBits(key_bits));
    }
    if l < 4 || l % 3 != 1 {
        return Err(ThresholdError::BadThreshold { k, l });
    }
    let f = (l - 1) / 3;
    if k < f + 1 || k > 2 * f + 1 {
        return Err(ThresholdError::BadThreshold { k, l });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let half = (key_bits / 2) as u64;
    let p = gen_safe_prime(half, &mut rng);
    let q = loop {
        let q = gen_safe_prime(half, &mut rng);
        if q != p {
            break q;
        }
    };
    let one = BigUint::one();
    let modulus = &p * &q;
    let p_prime: BigUint = (&p - &one) >> 1;
    let q_prime: BigUint = (&q - &one) >> 1;
    let m = &p_prime * &q_prime;
    let e = BigUint::from(PUB_EXP);
    let d = e.modinv(&m).ok_or(ThresholdError::NotInvertible)?;

    // Degree-(k-1) polynomial over Z_m with constant term d.
    let mut coeffs = vec![d.clone()];
    for _ in 1..k {
        coeffs.push(rand_below(&mut rng, &m));
    }
    let eval = |x: u32| -> BigUint {
        let xb = BigUint::from(x);
        let mut acc = BigUint::zero();
        for c in coeffs.iter().rev() {
            acc = (acc * &xb + c) % &m;
        }
        acc
    };

    // Verification base: a random square mod N.
    let verif_base = loop {
        let u = rand_below(&mut rng, &modulus);
        if u.is_zero() || u.modinv(&modulus).is_none() {
            continue;
        }
        break u.modpow(&BigUint::from(2u32), &modulus);
    };

    let secrets: Vec<BigUint> = (1..=l).map(eval).collect();
    let verif_keys: Vec<BigUint> = secrets
        .iter()
        .map(|s| verif_base.modpow(s, &modulus))
        .collect();

    let gk = GroupKey {
        modulus,
        pub_exp: e,
        verif_base,
        verif_keys,
        k,
        l,
        key_bits,
    };
    let shares = secrets
        .into_iter()
        .enumerate()
        .map(|(i, secret)| KeyShare {
            holder: i as u32 + 1,
            secret,
            group: gk.clone(),
        })
        .collect();
    let state = DealerState { p, q, m, d };
    Ok((gk, shares, state))
}

/// Produce this holder's signature share over `msg`, with its correctness
/// proof. Deterministic per (share, message).
pub fn sign_share(ks: &KeyShare, msg: &[u8]) -> SignatureShare {
    let gk = &ks.group;
    let n = &gk.modulus;
    let delta = factorial(gk.l);
    let x = hash_to_zn(msg, n);
    let two_delta_s = BigUint::from(2u32) * &delta * &ks.secret;
    let value = x.modpow(&two_delta_s, n);

    let x_tilde = x.modpow(&(BigUint::from(4u32) * &delta), n);
    let value_sq = value.modpow(&BigUint::from(2u32), n);
    let v_i = &gk.verif_keys[(ks.holder - 1) as usize];

    let r = proof_nonce(&ks.secret, msg, n.bits());
    let v_r = gk.verif_base.modpow(&r, n);
    let x_r = x_tilde.modpow(&r, n);
    let challenge = challenge_hash(&[&gk.verif_base, &x_tilde, v_i, &value_sq, &v_r, &x_r]);
    let response = &ks.secret * &challenge + &r;

    SignatureShare {
        holder: ks.holder,
        value,
        proof: EqLogProof {
            challenge,
            response,
        },
    }
}

/// Check a share's equality-of-discrete-log proof. Malformed shares return
/// `false` rather than erroring.
pub fn verify_share(gk: &GroupKey, msg: &[u8], s: &SignatureShare) -> bool {
    let n = &gk.modulus;
    if s.holder == 0 || s.holder > gk.l {
        return false;
    }
    if s.value.is_zero() || s.value >= *n {
        return false;
    }
    let delta = factorial(gk.l);
    let x = hash_to_zn(msg, n);
    let x_tilde = x.modpow(&(BigUint::from(4u32) * &delta), n);
    let value_sq = s.value.modpow(&BigUint::from(2u32), n);
    let v_i = &gk.verif_keys[(s.holder - 1) as usize];

    let c = &s.proof.challenge;
    let z = &s.proof.response;
    let inv_vi_c = match v_i.modpow(c, n).modinv(n) {
        Some(inv) => inv,
        None => return false,
    };
    let inv_xi_c = match value_sq.modpow(c, n).modinv(n) {
        Some(inv) => inv,
        None => return false,
    };
    let v_r = (gk.verif_base.modpow(z, n) * inv_vi_c) % n;
    let x_r = (x_tilde.modpow(z, n) * inv_xi_c) % n;
    let expect = challenge_hash(&[&gk.verif_base, &x_tilde, v_i, &value_sq, &v_r, &x_r]);
    expect == *c
}

/// Combine `k` valid shares into the group signature. Invalid shares are
/// filtered out first; the result is identical for every valid k-subset.
pub fn combine(
    gk: &GroupKey,
    msg: &[u8],
    shares: &[SignatureShare],
) -> Result<GroupSignature, ThresholdError> {
    let n = &gk.modulus;
    let need = gk.k as usize;
    let mut chosen: Vec<&SignatureShare> = Vec::with_capacity(need);
    for s in shares {
        if chosen.iter().any(|c| c.holder == s.holder) {
            continue;
        }
        if verify_share(gk, msg, s) {
            chosen.push(s);
            if chosen.len() == need {
                break;
            }
        }
    }
    if chosen.len() < need {
        return Err(ThresholdError::InsufficientShares {
            got: chosen.len(),
            need,
        });
    }

    let delta = BigInt::from(factorial(gk.l));
    let subset: Vec<i64> = chosen.iter().map(|s| s.holder as i64).collect();

    // w = prod x_j^{2 lambda_j} with lambda_j = delta * prod_{j'!=j} j'/(j'-j),
    // an exact integer thanks to the delta scaling.
    let mut w = BigUint::one();
    for s in &chosen {
        let j = s.holder as i64;
        let mut num = delta.clone();
        let mut den = BigInt::one();
        for &j2 in &subset {
            if j2 == j {
                continue;
            }
            num *= BigInt::from(j2);
            den *= BigInt::from(j2 - j);
        }
        let (lambda, rem) = num.div_rem(&den);
        debug_assert!(rem.is_zero(), "delta-scaled coefficient not integral");
        let exp = BigInt::from(2) * lambda;
        w = (w * modpow_signed(&s.value, &exp, n)?) % n;
    }

    // w^e = x^{e'} with e' = 4 delta^2; since gcd(e, e') = 1, Bezout
    // coefficients turn w into the plain e-th root of x.
    let x = hash_to_zn(msg, n);
    let e_prime = BigInt::from(4) * &delta * &delta;
    let e = BigInt::from_biguint(Sign::Plus, gk.pub_exp.clone());
    let ext = e_prime.extended_gcd(&e);
    if !ext.gcd.is_one() {
        return Err(ThresholdError::CombineFailed);
    }
    let y = (modpow_signed(&w, &ext.x, n)? * modpow_signed(&x, &ext.y, n)?) % n;

    let sig = GroupSignature { value: y };
    if !verify_signature(gk, msg, &sig) {
        return Err(ThresholdError::CombineFailed);
    }
    Ok(sig)
}

/// Standard RSA verification of the group signature: `y^e = H(msg) mod N`.
pub fn verify_signature(gk: &GroupKey, msg: &[u8], sig: &GroupSignature) -> bool {
    if sig.value.is_zero() || sig.value >= gk.modulus {
        return false;
    }
    let x = hash_to_zn(msg, &gk.modulus);
    sig.value.modpow(&gk.pub_exp, &gk.modulus) == x
}

/// Map a group signature to a random number: hash its big-endian byte
/// encoding and take the leading `bits` bits.
pub fn signature_to_random_with(
    sig: &GroupSignature,
    bits: u32,
    hash: CoinHash,
) -> Result<u64, ThresholdError> {
    let bytes = sig.value.to_bytes_be();
    let digest: Vec<u8> = match hash {
        CoinHash::Sha1 => {
            let mut h = Sha1::new();
            h.update(&bytes);
            h.finalize().to_vec()
        }
        CoinHash::Sha256 => {
            let mut h = Sha256::new();
            h.update(&bytes);
            h.finalize().to_vec()
        }
    };
    leading_bits_be(&digest, bits).map_err(|_| ThresholdError::UnsupportedWidth(bits))
}

/// [`signature_to_random_with`] using the default hash.
pub fn signature_to_random(sig: &GroupSignature, bits: u32) -> Result<u64, ThresholdError> {
    signature_to_random_with(sig, bits, CoinHash::Sha1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(k: u32, bits: u32) -> (GroupKey, Vec<KeyShare>, DealerState) {
        deal_with_dealer_state(k, 4, bits, 0xBEEF).expect("deal")
    }

    #[test]
    fn deal_is_seed_deterministic() {
        let (gk1, sh1) = deal(2, 4, 64, 7).unwrap();
        let (gk2, sh2) = deal(2, 4, 64, 7).unwrap();
        assert_eq!(gk1, gk2);
        assert_eq!(sh1, sh2);
        let (gk3, _) = deal(2, 4, 64, 8).unwrap();
        assert_ne!(gk1.modulus, gk3.modulus);
    }

    #[test]
    fn deal_rejects_bad_parameters() {
        assert_eq!(
            deal(2, 4, 96, 1).unwrap_err(),
            ThresholdError::UnsupportedKeyBits(96)
        );
        assert_eq!(
            deal(4, 4, 64, 1).unwrap_err(),
            ThresholdError::BadThreshold { k: 4, l: 4 }
        );
        assert_eq!(
            deal(1, 4, 64, 1).unwrap_err(),
            ThresholdError::BadThreshold { k: 1, l: 4 }
        );
    }

    #[test]
    fn modulus_is_product_of_safe_primes() {
        let (gk, _, st) = fixture(2, 64);
        assert_eq!(&st.p * &st.q, gk.modulus);
        assert_eq!(gk.modulus.bits(), 64);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let one = BigUint::one();
        for prime in [&st.p, &st.q] {
            assert!(miller_rabin(prime, 32, &mut rng));
            let half: BigUint = (prime - &one) >> 1;
            assert!(miller_rabin(&half, 32, &mut rng));
        }
    }

    #[test]
    fn sign_share_is_deterministic_and_verifies() {
        let (gk, shares, _) = fixture(2, 64);
        let msg = b"order-42";
        let s1 = sign_share(&shares[0], msg);
        let s2 = sign_share(&shares[0], msg);
        assert_eq!(s1, s2);
        assert!(verify_share(&gk, msg, &s1));
    }

    #[test]
    fn shares_are_pairwise_distinct_across_holders() {
        let (gk, shares, _) = fixture(2, 64);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut msg = [0u8; 40];
            rng.fill_bytes(&mut msg);
            let sigs: Vec<SignatureShare> =
                shares.iter().map(|ks| sign_share(ks, &msg)).collect();
            for a in 0..sigs.len() {
                assert!(verify_share(&gk, &msg, &sigs[a]));
                for b in (a + 1)..sigs.len() {
                    assert_ne!(sigs[a].value, sigs[b].value);
                }
            }
        }
    }

    #[test]
    fn share_does_not_verify_for_other_message() {
        let (gk, shares, _) = fixture(2, 64);
        let share = sign_share(&shares[1], b"msg-a");
        assert!(!verify_share(&gk, b"msg-b", &share));
        // One bit apart.
        assert!(!verify_share(&gk, b"msg-`", &share));
    }

    #[test]
    fn corrupted_share_values_are_rejected() {
        let (gk, shares, _) = fixture(2, 64);
        let msg = b"corruption-sweep";
        let honest = sign_share(&shares[2], msg);
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..100 {
            let mut bad = honest.clone();
            match rng.next_u64() % 3 {
                0 => bad.value = (&bad.value * BigUint::from(2u32)) % &gk.modulus,
                1 => bad.proof.challenge += BigUint::one(),
                _ => bad.proof.response += BigUint::one(),
            }
            assert!(!verify_share(&gk, msg, &bad));
        }
    }

    #[test]
    fn any_two_of_four_combine_identically_k2() {
        let (gk, shares, _) = fixture(2, 64);
        let msg = b"subset-independence";
        let sigs: Vec<SignatureShare> = shares.iter().map(|ks| sign_share(ks, msg)).collect();
        let a = combine(&gk, msg, &[sigs[0].clone(), sigs[1].clone()]).unwrap();
        let b = combine(&gk, msg, &[sigs[2].clone(), sigs[3].clone()]).unwrap();
        assert_eq!(a, b);
        assert!(verify_signature(&gk, msg, &a));
    }

    #[test]
    fn k3_requires_three_shares() {
        let (gk, shares, _) = fixture(3, 64);
        let msg = b"threshold-3";
        let sigs: Vec<SignatureShare> = shares.iter().map(|ks| sign_share(ks, msg)).collect();
        let err = combine(&gk, msg, &sigs[..2]).unwrap_err();
        assert_eq!(err, ThresholdError::InsufficientShares { got: 2, need: 3 });
        let ok = combine(&gk, msg, &sigs[..3]).unwrap();
        assert!(verify_signature(&gk, msg, &ok));
        let other = combine(&gk, msg, &sigs[1..4]).unwrap();
        assert_eq!(ok, other);
    }

    #[test]
    fn duplicate_holders_do_not_count_twice() {
        let (gk, shares, _) = fixture(2, 64);
        let msg = b"dup";
        let s = sign_share(&shares[0], msg);
        let err = combine(&gk, msg, &[s.clone(), s]).unwrap_err();
        assert_eq!(err, ThresholdError::InsufficientShares { got: 1, need: 2 });
    }

    /// Dealer-side oracle: the combined signature equals plain RSA signing
    /// with `e^{-1} mod 2m` (the exact inverse over the full group order).
    #[test]
    fn combination_matches_dealer_oracle() {
        for bits in [64u32, 128] {
            let (gk, shares, st) = fixture(2, bits);
            let msg = b"oracle-check";
            let sigs: Vec<SignatureShare> =
                shares.iter().map(|ks| sign_share(ks, msg)).collect();
            let combined = combine(&gk, msg, &sigs).unwrap();

            let two_m = &st.m << 1;
            let d_full = gk.pub_exp.modinv(&two_m).expect("e invertible mod 2m");
            let x = hash_to_zn(msg, &gk.modulus);
            let expected = x.modpow(&d_full, &gk.modulus);
            assert_eq!(combined.value, expected);
        }
    }

    #[test]
    fn group_signature_verification_is_binding() {
        let (gk, shares, _) = fixture(2, 64);
        let msg = b"binding";
        let sigs: Vec<SignatureShare> = shares.iter().map(|ks| sign_share(ks, msg)).collect();
        let sig = combine(&gk, msg, &sigs).unwrap();
        assert!(verify_signature(&gk, msg, &sig));
        let forged = GroupSignature {
            value: (&sig.value + BigUint::one()) % &gk.modulus,
        };
        assert!(!verify_signature(&gk, msg, &forged));
        assert!(!verify_signature(&gk, b"other", &sig));
    }

    #[test]
    fn corrupted_shares_never_change_the_combined_output() {
        let (gk, shares, _) = fixture(2, 64);
        let msg = b"robustness";
        let honest: Vec<SignatureShare> = shares.iter().map(|ks| sign_share(ks, msg)).collect();
        let baseline = combine(&gk, msg, &honest).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..50 {
            let mut mixed = honest.clone();
            // Corrupt f = 1 of the shares, placed first so it is tried first.
            let idx = (rng.next_u64() % 4) as usize;
            mixed[idx].value = (&mixed[idx].value + BigUint::one()) % &gk.modulus;
            mixed.swap(0, idx);
            let out = combine(&gk, msg, &mixed).unwrap();
            assert_eq!(out, baseline);
        }
    }

    #[test]
    fn signature_to_random_matches_hash_oracle() {
        let (gk, shares, _) = fixture(2, 64);
        for i in 0..10u8 {
            let msg = [b"coin-", &[i][..]].concat();
            let sigs: Vec<SignatureShare> =
                shares.iter().map(|ks| sign_share(ks, &msg)).collect();
            let sig = combine(&gk, &msg, &sigs).unwrap();

            // Independent oracle: hash the big-endian bytes, slice the front.
            let mut h = Sha1::new();
            h.update(sig.value.to_bytes_be());
            let digest = h.finalize();
            let expect32 = u32::from_be_bytes(digest[..4].try_into().unwrap()) as u64;
            assert_eq!(signature_to_random(&sig, 32).unwrap(), expect32);
            assert_eq!(
                signature_to_random(&sig, 8).unwrap(),
                (expect32 >> 24) & 0xff
            );
            assert_eq!(
                signature_to_random(&sig, 32).unwrap(),
                signature_to_random(&sig, 32).unwrap()
            );

            let mut h2 = Sha256::new();
            Sha2Digest::update(&mut h2, sig.value.to_bytes_be());
            let d2 = h2.finalize();
            let expect256 = u32::from_be_bytes(d2[..4].try_into().unwrap()) as u64;
            assert_eq!(
                signature_to_random_with(&sig, 32, CoinHash::Sha256).unwrap(),
                expect256
            );
        }
    }

    #[test]
    fn signature_to_random_rejects_odd_widths() {
        let sig = GroupSignature {
            value: BigUint::from(12345u32),
        };
        assert!(signature_to_random(&sig, 24).is_err());
        assert!(signature_to_random(&sig, 64).is_ok());
    }
}
