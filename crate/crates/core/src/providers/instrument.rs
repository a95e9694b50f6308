//! Call counting and in-flight tracking around any provider.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{EntityExtractor, ImageEmbedder, ImageGenerator, ProviderError, QualityJudge, TextGenerator, TextParams};
use crate::entity::Category;
use crate::image::ImageGenParams;

#[derive(Debug, Default)]
pub struct CallStats {
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl CallStats {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn track<T>(&self, f: impl FnOnce() -> T) -> T {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let out = f();
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

/// Wraps a provider and records every call in a shared [`CallStats`].
pub struct Instrumented<P> {
    inner: P,
    stats: Arc<CallStats>,
}

impl<P> Instrumented<P> {
    pub fn new(inner: P) -> (Self, Arc<CallStats>) {
        let stats = Arc::new(CallStats::default());
        (
            Instrumented {
                inner,
                stats: stats.clone(),
            },
            stats,
        )
    }
}

impl<P: TextGenerator> TextGenerator for Instrumented<P> {
    fn generate(&self, prompt: &str, params: &TextParams) -> Result<String, ProviderError> {
        self.stats.track(|| self.inner.generate(prompt, params))
    }
}

impl<P: EntityExtractor> EntityExtractor for Instrumented<P> {
    fn extract(&self, text: &str) -> Result<Vec<(String, Category)>, ProviderError> {
        self.stats.track(|| self.inner.extract(text))
    }
}

impl<P: ImageGenerator> ImageGenerator for Instrumented<P> {
    fn generate(&self, prompt: &str, params: &ImageGenParams) -> Result<Vec<u8>, ProviderError> {
        self.stats.track(|| self.inner.generate(prompt, params))
    }
}

impl<P: QualityJudge> QualityJudge for Instrumented<P> {
    fn answer(&self, image: &[u8], query: &str) -> Result<String, ProviderError> {
        self.stats.track(|| self.inner.answer(image, query))
    }
}

impl<P: ImageEmbedder> ImageEmbedder for Instrumented<P> {
    fn embed(&self, image: &[u8]) -> Result<Vec<f32>, ProviderError> {
        self.stats.track(|| self.inner.embed(image))
    }
}
