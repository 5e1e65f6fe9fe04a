//! Client for an external embedding service.
//!
//! Contract: `POST {endpoint}/embed` with `{"model": str, "texts": [str, ...]}`,
//! answered by `{"vectors": [[f64, ...], ...]}`. Any non-200 reply is retried.

use serde::{Deserialize, Serialize};

use super::cache::{cache_key, EmbeddingCache};
use super::{Embedder, EmbeddingVector};
use crate::error::{MascError, Result};
use crate::http::{join_url, HttpOptions, JsonClient};

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

pub struct RemoteEmbedder {
    url: String,
    model_name: String,
    dim: usize,
    client: JsonClient,
    cache: Option<EmbeddingCache>,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: &str,
        model_name: &str,
        dim: usize,
        cache: Option<EmbeddingCache>,
        http: HttpOptions,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(MascError::config("embedding dimension must be positive"));
        }
        Ok(RemoteEmbedder {
            url: join_url(endpoint, "embed"),
            model_name: model_name.to_string(),
            dim,
            client: JsonClient::new(http),
            cache,
        })
    }

    pub fn cache(&self) -> Option<&EmbeddingCache> {
        self.cache.as_ref()
    }

    fn fetch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let resp: EmbedResponse = self
            .client
            .post_json(&self.url, &EmbedRequest { model: &self.model_name, texts })?;
        if resp.vectors.len() != texts.len() {
            return Err(MascError::config(format!(
                "embedding service returned {} vectors for {} texts",
                resp.vectors.len(),
                texts.len()
            )));
        }
        for v in &resp.vectors {
            if v.len() != self.dim {
                return Err(MascError::config(format!(
                    "embedding service returned dimension {}, configured {}",
                    v.len(),
                    self.dim
                )));
            }
        }
        Ok(resp.vectors)
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_batch(&[text])?.pop().expect("one vector per text"))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(MascError::precondition("cannot embed empty text"));
        }
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut missing = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            match self.cache.as_ref().and_then(|c| c.get(&cache_key(&self.model_name, text))) {
                Some(v) if v.len() == self.dim => out[i] = Some(v),
                _ => missing.push(i),
            }
        }
        if !missing.is_empty() {
            let batch: Vec<&str> = missing.iter().map(|&i| texts[i]).collect();
            let fetched = self.fetch(&batch)?;
            for (&i, v) in missing.iter().zip(fetched) {
                if let Some(c) = &self.cache {
                    c.insert(cache_key(&self.model_name, texts[i]), &v)?;
                }
                out[i] = Some(v);
            }
        }
        out.into_iter().map(|v| EmbeddingVector::new(v.expect("filled above"))).collect()
    }
}
