//! Category descriptions: prompt templates, the language-model endpoint
//! abstraction, sentence selection with an on-disk cache, and the word-level
//! tokenizer feeding the text encoder.

pub mod describe;
pub mod endpoint;
pub mod prompt;
pub mod vocab;

pub use describe::{generate_descriptions, DescriptionRecord, DescriptionSet, GenerateOptions, ResponseCache};
pub use endpoint::{CompletionRequest, EndpointClient, HttpClient, OfflineCorpus, ReplayClient};
pub use prompt::{render_prompt, PromptTemplate};
pub use vocab::{tokenize, Vocabulary};
