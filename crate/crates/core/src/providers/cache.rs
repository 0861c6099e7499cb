use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{check_batch, check_text, Embedder, EmbeddingVector, ProviderError};

type Slot = Arc<Mutex<Option<EmbeddingVector>>>;

/// Content-keyed embedding cache in front of another embedder.
///
/// Keys are the exact text bytes. Each key has its own slot lock, so
/// concurrent callers asking for the same text wait for a single upstream
/// call instead of issuing their own. Failed calls leave the slot empty.
pub struct CachedEmbedder<E> {
    inner: E,
    slots: Mutex<HashMap<String, Slot>>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            slots: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    /// Number of texts with a stored embedding.
    pub fn len(&self) -> usize {
        let slots = self.slots.lock().expect("cache lock poisoned");
        slots
            .values()
            .filter(|s| s.lock().map(|v| v.is_some()).unwrap_or(false))
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(&self, text: &str) -> Slot {
        let mut slots = self.slots.lock().expect("cache lock poisoned");
        slots.entry(text.to_string()).or_default().clone()
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        check_text(text)?;
        let slot = self.slot(text);
        let mut guard = slot.lock().expect("cache slot poisoned");
        if let Some(v) = guard.as_ref() {
            return Ok(v.clone());
        }
        let v = self.inner.embed(text)?;
        *guard = Some(v.clone());
        Ok(v)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        check_batch(texts)?;
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::MockEmbedder;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        inner: MockEmbedder,
        calls: AtomicUsize,
    }

    impl Embedder for Counting {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(2));
            self.inner.embed(text)
        }
    }

    fn counting() -> CachedEmbedder<Counting> {
        CachedEmbedder::new(Counting {
            inner: MockEmbedder::new(7),
            calls: AtomicUsize::new(0),
        })
    }

    #[test]
    fn repeated_texts_are_embedded_once() {
        let cache = counting();
        let out = cache.embed_batch(&["a".into(), "b".into(), "a".into()]).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], out[2]);
        assert_ne!(out[0], out[1]);
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.inner().calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn empty_batch() {
        assert!(counting().embed_batch(&[]).unwrap().is_empty());
    }

    #[test]
    fn empty_entry_fails_without_touching_cache() {
        let cache = counting();
        let err = cache.embed_batch(&["a".into(), "".into()]).unwrap_err();
        assert!(matches!(err, ProviderError::BadRequest(_)));
        assert!(cache.is_empty());
        assert_eq!(cache.inner().calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn concurrent_requests_embed_each_key_once() {
        let cache = counting();
        let texts: Vec<String> = (0..5).map(|i| format!("text {i}")).collect();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for t in &texts {
                        cache.embed(t).unwrap();
                    }
                });
            }
        });
        assert_eq!(cache.inner().calls.load(Ordering::SeqCst), 5);
        assert_eq!(cache.len(), 5);
    }
}
