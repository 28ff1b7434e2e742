//! Index bookkeeping for the stacked vectors used throughout the crate.
//!
//! Player `i`'s filter state is `s = [v; v̂^i; v̂^{-i}; x^i]` with the other
//! players in ascending index order. The public offsets of all players are
//! stacked as `f = [f^1; ...; f^N]`, where `f^i` holds one `N_v` block per
//! other player, again in ascending order.

/// Dimensions of a game, plus the offsets derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub nv: usize,
    pub na: usize,
}

impl Layout {
    pub fn new(n: usize, nv: usize, na: usize) -> Self {
        Self { n, nv, na }
    }

    pub fn of(spec: &crate::GameSpec) -> Self {
        Self::new(spec.n_players, spec.dim_v, spec.dim_a)
    }

    /// Players other than `i`, ascending.
    pub fn others(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| j != i)
    }

    /// Position of player `j` in the ordered list of players other than `i`.
    pub fn pos(&self, i: usize, j: usize) -> usize {
        debug_assert_ne!(i, j);
        if j < i {
            j
        } else {
            j - 1
        }
    }

    // public offsets

    /// Length of one player's offset vector `f^i`.
    pub fn f_len(&self) -> usize {
        (self.n - 1) * self.nv
    }

    /// Length of the stacked offset vector `f`.
    pub fn n_f(&self) -> usize {
        self.n * self.f_len()
    }

    pub fn f_block(&self, i: usize) -> usize {
        i * self.f_len()
    }

    /// Offset of player `i`'s estimate of `v̂^j` inside the stacked `f`.
    pub fn f_sub(&self, i: usize, j: usize) -> usize {
        self.f_block(i) + self.pos(i, j) * self.nv
    }

    // filter state

    pub fn s_dim(&self) -> usize {
        (self.n + 2) * self.nv
    }

    pub fn s_v(&self) -> usize {
        0
    }

    pub fn s_own(&self) -> usize {
        self.nv
    }

    pub fn s_others(&self) -> usize {
        2 * self.nv
    }

    pub fn s_other(&self, i: usize, j: usize) -> usize {
        self.s_others() + self.pos(i, j) * self.nv
    }

    pub fn s_x(&self) -> usize {
        (self.n + 1) * self.nv
    }

    // observation of stage k >= 2: [own action; others' actions; own signal]

    pub fn y_dim(&self) -> usize {
        self.n * self.na + self.nv
    }

    pub fn y_own(&self) -> usize {
        0
    }

    pub fn y_others(&self) -> usize {
        self.na
    }

    pub fn y_other(&self, i: usize, j: usize) -> usize {
        self.na + self.pos(i, j) * self.na
    }

    pub fn y_x(&self) -> usize {
        self.n * self.na
    }

    // stage noise [w^{-i}_k; w^i_{k+1}]

    pub fn noise_dim(&self) -> usize {
        self.n * self.nv
    }

    pub fn noise_other(&self, i: usize, j: usize) -> usize {
        self.pos(i, j) * self.nv
    }

    pub fn noise_own(&self) -> usize {
        (self.n - 1) * self.nv
    }

    // stacked actions

    pub fn a_dim(&self) -> usize {
        self.n * self.na
    }

    pub fn a_of(&self, j: usize) -> usize {
        j * self.na
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_player_offsets() {
        let l = Layout::new(3, 2, 1);
        assert_eq!(l.others(1).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(l.pos(1, 2), 1);
        assert_eq!(l.f_len(), 4);
        assert_eq!(l.f_sub(2, 1), 8 + 2);
        assert_eq!(l.s_dim(), 10);
        assert_eq!(l.s_other(0, 2), 4 + 2);
        assert_eq!(l.s_x(), 8);
        assert_eq!(l.y_dim(), 5);
        assert_eq!(l.noise_own(), 4);
    }
}
