use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdgError {
    #[error("prompt is empty after normalization")]
    PromptTooShort,
    #[error("prompt has {0} content tokens, maximum is 75")]
    PromptTooLong(usize),
    #[error("malformed tree: non-leaf node '{0}' has zero children")]
    MalformedTree(String),
    #[error("scene graph relation references missing entity index {0}")]
    DanglingRelation(usize),
    #[error("span '{0}' not found as an unused occurrence in the prompt")]
    SpanNotFound(String),
    #[error("syntax error at line {line}, column {col}: {msg}")]
    SyntaxError { line: usize, col: usize, msg: String },
    #[error("tree leaves do not match prompt: {0}")]
    LeafMismatch(String),
    #[error("embed_dim {dim} not divisible by num_heads {heads}")]
    IndivisibleDim { dim: usize, heads: usize },
    #[error("span covers {span_len} tokens but standalone encoding has {content_len} content rows")]
    LengthMismatch { span_len: usize, content_len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("generation records do not match: {0}")]
    RecordMismatch(String),
    #[error("training loss became non-finite at step {0}")]
    DivergedLoss(usize),
    #[error("requested {requested} prompts but only {available} combinations exist")]
    InsufficientCombinations { requested: usize, available: usize },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SdgError>;
