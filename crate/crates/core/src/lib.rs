pub mod harness;
pub mod middlebox;
pub mod netsim;
pub mod quicstep;
pub mod transport;
pub mod wire;
