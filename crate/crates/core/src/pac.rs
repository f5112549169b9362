//! Software emulation of the pointer-authentication instructions used by the
//! scheme: sign (PACIA analog), authenticate (AUTIA analog) and strip (XPAC
//! analog).
//!
//! A signed pointer keeps the simulated address in its low 48 bits and a
//! 16-bit authentication code in bits 63..48.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of significant address bits.
pub const ADDRESS_BITS: u32 = 48;
/// Mask selecting the address part of a pointer.
pub const ADDRESS_MASK: u64 = (1 << ADDRESS_BITS) - 1;
/// Value written into bits 63..56 of a pointer that failed authentication
/// under v8.3 semantics.
pub const POISON_PATTERN: u8 = 0x20;

/// A simulated address. Canonical when the high 16 bits are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct RawAddress(pub u64);

impl RawAddress {
    pub fn is_canonical(self) -> bool {
        self.0 & !ADDRESS_MASK == 0
    }

    pub fn offset(self, delta: i64) -> RawAddress {
        RawAddress(self.0.wrapping_add(delta as u64) & ADDRESS_MASK)
    }
}

impl fmt::Display for RawAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// A 16-bit authentication code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AuthCode(pub u16);

/// A 64-bit pointer carrying an authentication code in its unused high bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct SignedPointer(pub u64);

impl SignedPointer {
    pub fn from_parts(ac: AuthCode, addr: RawAddress) -> Self {
        SignedPointer(((ac.0 as u64) << ADDRESS_BITS) | (addr.0 & ADDRESS_MASK))
    }

    pub fn auth_code(self) -> AuthCode {
        AuthCode((self.0 >> ADDRESS_BITS) as u16)
    }

    pub fn address(self) -> RawAddress {
        pac_strip(self)
    }

    /// Same authentication code, different address bits. Pointer arithmetic
    /// goes through here, so the code travels with every derived pointer.
    pub fn with_address(self, addr: RawAddress) -> Self {
        SignedPointer((self.0 & !ADDRESS_MASK) | (addr.0 & ADDRESS_MASK))
    }
}

impl fmt::Display for SignedPointer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

/// 128-bit key material.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Key128(pub u128);

impl Key128 {
    fn halves(self) -> (u64, u64) {
        (self.0 as u64, (self.0 >> 64) as u64)
    }

    /// XOR of the eight 16-bit lanes of the key.
    pub fn fold16(self) -> u16 {
        (0..8).fold(0u16, |acc, lane| acc ^ (self.0 >> (16 * lane)) as u16)
    }
}

impl fmt::Debug for Key128 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Key128(<redacted>)")
    }
}

/// Key slots of the PAC instruction family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeySlot {
    #[default]
    Ia,
    Ib,
    Da,
    Db,
    Ga,
}

impl KeySlot {
    pub const ALL: [KeySlot; 5] = [KeySlot::Ia, KeySlot::Ib, KeySlot::Da, KeySlot::Db, KeySlot::Ga];
}

/// The five keys held by the runtime.
#[derive(Clone, PartialEq, Eq)]
pub struct KeySet {
    ia: Key128,
    ib: Key128,
    da: Key128,
    db: Key128,
    ga: Key128,
}

impl KeySet {
    pub fn get(&self, slot: KeySlot) -> Key128 {
        match slot {
            KeySlot::Ia => self.ia,
            KeySlot::Ib => self.ib,
            KeySlot::Da => self.da,
            KeySlot::Db => self.db,
            KeySlot::Ga => self.ga,
        }
    }
}

impl fmt::Debug for KeySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeySet(<redacted>)")
    }
}

/// Expands a seed into five pairwise distinct keys.
pub fn derive_keys(seed: u64) -> KeySet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut keys: Vec<Key128> = Vec::with_capacity(5);
    while keys.len() < 5 {
        let k = Key128(((rng.next_u64() as u128) << 64) | rng.next_u64() as u128);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    KeySet { ia: keys[0], ib: keys[1], da: keys[2], db: keys[3], ga: keys[4] }
}

/// How a failed authentication is delivered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum PacMode {
    /// ARMv8.3: the pointer is returned with a poison pattern in its top byte.
    #[default]
    V83Poison,
    /// ARMv8.6: a fault is raised.
    V86Fault,
}

/// Function used to compute authentication codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AcFunction {
    /// Low 16 bits of address XOR low 16 bits of modifier XOR the folded key.
    XorFold,
    /// Keyed mixer over all 64 bits of address and modifier.
    #[default]
    KeyedMixer,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn compute_ac(addr: RawAddress, modifier: u64, key: Key128, function: AcFunction) -> AuthCode {
    match function {
        AcFunction::XorFold => AuthCode((addr.0 as u16) ^ (modifier as u16) ^ key.fold16()),
        AcFunction::KeyedMixer => {
            let (k0, k1) = key.halves();
            let mut h = mix64(addr.0 ^ k0);
            h = mix64(h ^ modifier ^ k1.rotate_left(17));
            h = mix64(h.wrapping_add(k0.rotate_left(32) ^ k1));
            AuthCode((h ^ (h >> 16) ^ (h >> 32) ^ (h >> 48)) as u16)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PacError {
    #[error("address {0} is not canonical")]
    NonCanonicalAddress(RawAddress),
}

/// Result of an authentication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuthResult {
    Ok(RawAddress),
    Poisoned(SignedPointer),
    Fault,
}

impl AuthResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, AuthResult::Ok(_))
    }
}

pub fn pac_sign(addr: RawAddress, modifier: u64, key: Key128, function: AcFunction) -> Result<SignedPointer, PacError> {
    if !addr.is_canonical() {
        return Err(PacError::NonCanonicalAddress(addr));
    }
    Ok(SignedPointer::from_parts(compute_ac(addr, modifier, key, function), addr))
}

pub fn pac_auth(sp: SignedPointer, modifier: u64, key: Key128, function: AcFunction, mode: PacMode) -> AuthResult {
    let addr = pac_strip(sp);
    if sp.auth_code() == compute_ac(addr, modifier, key, function) {
        return AuthResult::Ok(addr);
    }
    match mode {
        PacMode::V83Poison => AuthResult::Poisoned(poison(sp)),
        PacMode::V86Fault => AuthResult::Fault,
    }
}

fn poison(sp: SignedPointer) -> SignedPointer {
    SignedPointer((sp.0 & !(0xff << 56)) | ((POISON_PATTERN as u64) << 56))
}

pub fn pac_strip(sp: SignedPointer) -> RawAddress {
    RawAddress(sp.0 & ADDRESS_MASK)
}

/// A configured signer: keys, key slot, AC function and failure mode bundled
/// together. The runtime owns one; nothing handed to simulated programs can
/// reach the keys through it.
#[derive(Clone, Debug)]
pub struct PacEngine {
    keys: KeySet,
    slot: KeySlot,
    function: AcFunction,
    mode: PacMode,
}

impl PacEngine {
    pub fn new(seed: u64, slot: KeySlot, function: AcFunction, mode: PacMode) -> Self {
        PacEngine { keys: derive_keys(seed), slot, function, mode }
    }

    pub fn mode(&self) -> PacMode {
        self.mode
    }

    pub fn function(&self) -> AcFunction {
        self.function
    }

    pub fn ac(&self, addr: RawAddress, modifier: u64) -> AuthCode {
        compute_ac(addr, modifier, self.keys.get(self.slot), self.function)
    }

    pub fn sign(&self, addr: RawAddress, modifier: u64) -> Result<SignedPointer, PacError> {
        pac_sign(addr, modifier, self.keys.get(self.slot), self.function)
    }

    pub fn auth(&self, sp: SignedPointer, modifier: u64) -> AuthResult {
        pac_auth(sp, modifier, self.keys.get(self.slot), self.function, self.mode)
    }
}
