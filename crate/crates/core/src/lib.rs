pub mod corpus;
pub mod embed;
pub mod evalbench;
pub mod losses;
pub mod seq2seq;
pub mod specfun;
pub mod synthetic;
