use std::num::NonZeroUsize;
use std::sync::Arc;
use std::time::{Duration, Instant};

use lru::LruCache;
use oodinv::nets::ImageTensor;
use oodinv::pipeline::Inversion;
use parking_lot::Mutex;

use crate::ApiError;

/// The cached unedited pass of one uploaded image.
pub struct Session {
    pub image: ImageTensor,
    pub inversion: Inversion,
    created: Instant,
}

impl Session {
    pub fn new(image: ImageTensor, inversion: Inversion) -> Self {
        Session { image, inversion, created: Instant::now() }
    }
}

/// Bounded LRU of sessions keyed by random 128-bit ids. Entries expire a
/// fixed time after creation; expired entries stay until evicted so their
/// ids keep reporting expiry rather than "unknown".
pub struct SessionStore {
    inner: Mutex<LruCache<String, Arc<Session>>>,
    ttl: Duration,
}

impl SessionStore {
    pub fn new(capacity: NonZeroUsize, ttl: Duration) -> Self {
        SessionStore { inner: Mutex::new(LruCache::new(capacity)), ttl }
    }

    pub fn insert(&self, session: Session) -> String {
        let id = format!("{:032x}", rand::random::<u128>());
        self.inner.lock().put(id.clone(), Arc::new(session));
        id
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        let mut cache = self.inner.lock();
        let Some(s) = cache.get(id) else {
            return Err(ApiError::not_found("session_not_found", format!("unknown session {id:?}")));
        };
        if s.created.elapsed() > self.ttl {
            return Err(ApiError::not_found("session_expired", format!("session {id:?} has expired")));
        }
        Ok(s.clone())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
