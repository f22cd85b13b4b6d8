//! Local accounts and session tokens.
//!
//! Passwords are stored as salted SHA-256. Sessions live in memory, so a
//! restart logs everyone out.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use rand::RngCore;
use sae_core::store::{RecordKind, Store, StoreError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Teacher,
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "student" => Ok(Role::Student),
            "teacher" => Ok(Role::Teacher),
            other => Err(format!("unknown role {other:?} (expected student or teacher)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub user_id: String,
    pub role: Role,
    salt: String,
    password_hash: String,
}

fn digest(salt: &[u8], password: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(password.as_bytes());
    hex::encode(h.finalize())
}

impl User {
    pub fn new(user_id: &str, role: Role, password: &str) -> Self {
        let mut salt = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut salt);
        User { user_id: user_id.into(), role, salt: hex::encode(salt), password_hash: digest(&salt, password) }
    }

    pub fn verify(&self, password: &str) -> bool {
        let Ok(salt) = hex::decode(&self.salt) else { return false };
        let got = digest(&salt, password);
        // no early exit on the first differing byte
        got.len() == self.password_hash.len()
            && got.bytes().zip(self.password_hash.bytes()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
    }
}

pub fn valid_user_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.@".contains(c))
}

/// Creates or replaces an account.
pub fn put_user(store: &Store, user_id: &str, role: Role, password: &str) -> Result<User, StoreError> {
    if !valid_user_id(user_id) {
        return Err(StoreError::Conflict(format!("invalid user id {user_id:?}")));
    }
    if password.is_empty() {
        return Err(StoreError::Conflict("empty password".into()));
    }
    let user = User::new(user_id, role, password);
    store.put_record(RecordKind::User, user_id, &user)?;
    Ok(user)
}

pub fn user(store: &Store, user_id: &str) -> Result<Option<User>, StoreError> {
    if !valid_user_id(user_id) {
        return Ok(None);
    }
    Ok(store.get_record(RecordKind::User, user_id)?.map(|v| v.data))
}

pub fn users(store: &Store) -> Result<Vec<User>, StoreError> {
    Ok(store.list_records(RecordKind::User)?.into_iter().map(|(_, v)| v.data).collect())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedFile {
    #[serde(default)]
    user: Vec<SeedUser>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedUser {
    id: String,
    role: Role,
    password: String,
}

/// Applies a seed file. Accounts whose password already matches are left
/// untouched; the rest are created or reset.
pub fn seed_users(store: &Store, path: &Path) -> anyhow::Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    let seed: SeedFile = toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let mut changed = 0;
    for u in seed.user {
        match user(store, &u.id)? {
            Some(existing) if existing.role == u.role && existing.verify(&u.password) => {}
            _ => {
                put_user(store, &u.id, u.role, &u.password)?;
                changed += 1;
            }
        }
    }
    Ok(changed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Session {
    pub token: String,
    pub user_id: String,
    pub role: Role,
    pub expires_at: DateTime<Utc>,
}

impl Session {
    pub fn is_teacher(&self) -> bool {
        self.role == Role::Teacher
    }
}

pub struct Sessions {
    ttl: chrono::Duration,
    map: Mutex<HashMap<String, Session>>,
}

impl Sessions {
    pub fn new(ttl: chrono::Duration) -> Self {
        Sessions { ttl, map: Mutex::new(HashMap::new()) }
    }

    pub fn open(&self, user: &User, now: DateTime<Utc>) -> Session {
        let mut raw = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut raw);
        let session = Session {
            token: hex::encode(raw),
            user_id: user.user_id.clone(),
            role: user.role,
            expires_at: now + self.ttl,
        };
        let mut map = self.map.lock();
        map.retain(|_, s| s.expires_at > now);
        map.insert(session.token.clone(), session.clone());
        session
    }

    /// The live session for `token`; expired sessions are dropped.
    pub fn get(&self, token: &str, now: DateTime<Utc>) -> Option<Session> {
        let mut map = self.map.lock();
        match map.get(token) {
            Some(s) if s.expires_at > now => Some(s.clone()),
            Some(_) => {
                map.remove(token);
                None
            }
            None => None,
        }
    }

    pub fn close(&self, token: &str) -> bool {
        self.map.lock().remove(token).is_some()
    }
}
