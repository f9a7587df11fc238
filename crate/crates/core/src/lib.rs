pub mod aggregate;
pub mod assignment;
pub mod document;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod record;
pub mod rev;
pub mod schema;
pub mod store;
pub mod units;
pub mod value;
