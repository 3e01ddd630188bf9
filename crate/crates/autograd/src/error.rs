use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("autograd error: {0}")]
    Graph(String),
}

pub type Result<T> = std::result::Result<T, Error>;
