use super::{NumericsError, Real, Tape, Tensor, Var};

/// Final hidden state of a single-layer LSTM run over the rows of `inputs`.
///
/// `w` is `4H x D`, `u` is `4H x H`, `b` is `4H`; gate blocks are ordered
/// input, forget, cell, output. The initial hidden and cell states are zero.
pub fn lstm_final<R: Real>(tape: &mut Tape<'_, R>, inputs: Var, w: Var, u: Var, b: Var) -> Result<Var, NumericsError> {
    let x = tape.value(inputs);
    if x.rank() != 2 {
        return Err(NumericsError::ShapeMismatch(format!("lstm input must be L x D, got {:?}", x.shape())));
    }
    let len = x.shape()[0];
    if len == 0 {
        return Err(NumericsError::EmptyInput);
    }
    let gates = tape.value(u).shape().first().copied().unwrap_or(0);
    if gates % 4 != 0 || gates == 0 {
        return Err(NumericsError::ShapeMismatch(format!("lstm gate rows {gates} not a positive multiple of 4")));
    }
    let hidden = gates / 4;
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    let mut c = tape.constant(Tensor::zeros(&[hidden]));
    for t in 0..len {
        let xt = tape.row(inputs, t)?;
        let wx = tape.affine(w, b, xt)?;
        let uh = tape.matvec(u, h)?;
        let z = tape.add(wx, uh)?;
        let zi = tape.slice(z, 0, hidden)?;
        let zf = tape.slice(z, hidden, hidden)?;
        let zg = tape.slice(z, 2 * hidden, hidden)?;
        let zo = tape.slice(z, 3 * hidden, hidden)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
    }
    Ok(h)
}
