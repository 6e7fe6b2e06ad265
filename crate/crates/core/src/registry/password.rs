//! Salted, iterated password hashes.
//!
//! Stored as `pbkdf2-sha256$<iterations>$<salt hex>$<hash hex>` so the
//! parameters travel with every record.

use pbkdf2::pbkdf2_hmac_array;
use pbkdf2::sha2::Sha256;
use rand::Rng;

pub const DEFAULT_ITERATIONS: u32 = 100_000;
const SCHEME: &str = "pbkdf2-sha256";

pub fn hash_password<R: Rng + ?Sized>(password: &str, iterations: u32, rng: &mut R) -> String {
    let salt: [u8; 16] = rng.random();
    let hash = pbkdf2_hmac_array::<Sha256, 32>(password.as_bytes(), &salt, iterations);
    format!("{SCHEME}${iterations}${}${}", hex::encode(salt), hex::encode(hash))
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Checks a password against a stored record. Malformed records never match.
pub fn verify_password(password: &str, stored: &str) -> bool {
    let parts: Vec<&str> = stored.split('$').collect();
    let [SCHEME, iterations, salt, hash] = parts.as_slice() else {
        return false;
    };
    let (Ok(iterations), Ok(salt), Ok(expected)) =
        (iterations.parse::<u32>(), hex::decode(salt), hex::decode(hash))
    else {
        return false;
    };
    let actual = pbkdf2_hmac_array::<Sha256, 32>(password.as_bytes(), &salt, iterations);
    constant_time_eq(&actual, &expected)
}
