/// One stored experience `(x, a, r, x', terminal)`.
///
/// `S` is the state type (a scalar on LineSearch, a feature vector on the
/// control tasks) and `A` the action identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S, A> {
    pub state: S,
    pub action: A,
    pub reward: f64,
    pub next_state: S,
    pub terminal: bool,
}

impl<S, A> Transition<S, A> {
    pub fn new(state: S, action: A, reward: f64, next_state: S, terminal: bool) -> Self {
        Self {
            state,
            action,
            reward,
            next_state,
            terminal,
        }
    }
}
