pub mod cluster_eval;
pub mod eval;
pub mod gen_data;
pub mod gradcheck;
pub mod pretrain;
pub mod split;
pub mod supervised;
