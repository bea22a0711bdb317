"""Exact dynamic-programming oracles for tabular games.

Policies here are canonical-state matrices ``pi[s, a]`` (see
:func:`amtft.artifacts.policy_matrix`).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from amtft.envs.tabular import TabularGame


class OracleError(RuntimeError):
    pass


@dataclass
class ExactQ:
    V: np.ndarray        # (2, S)
    Qjoint: np.ndarray   # (2, S, A1, A2)
    Q1: np.ndarray       # (S, A1): player 1's Q, partner marginalised
    Q2: np.ndarray       # (S, A2)
    residual: float
    iterations: int

    def q(self, seat: int) -> np.ndarray:
        return self.Q1 if seat == 0 else self.Q2


def exact_q(game: TabularGame, pi1, pi2, discount: float, tol: float = 1e-12, max_iter: int = 1_000_000) -> ExactQ:
    """Iterative policy evaluation to Bellman residual < ``tol``."""
    if not game.tabular:
        raise OracleError("oracle requires tabular game")
    pi1, pi2 = np.asarray(pi1, float), np.asarray(pi2, float)
    P, R = game.P, game.R
    joint = pi1[:, :, None] * pi2[:, None, :]               # (S, A1, A2)
    r_pi = np.einsum("sab,isab->is", joint, R)               # (2, S)
    P_pi = np.einsum("sab,sabt->st", joint, P)               # (S, S)
    V = np.zeros((2, game.n_states))
    residual = np.inf
    it = 0
    while it < max_iter:
        new = r_pi + discount * V @ P_pi.T
        residual = float(np.abs(new - V).max())
        V = new
        it += 1
        if residual < tol:
            break
    else:
        raise OracleError(f"policy evaluation did not converge (residual {residual:.3g} after {it} iterations)")
    Qjoint = R + discount * np.einsum("sabt,it->isab", P, V)
    # one more backup so the reported residual is measured on the returned V
    residual = float(np.abs(np.einsum("sab,isab->is", joint, Qjoint) - V).max())
    Q1 = np.einsum("sab,sb->sa", Qjoint[0], pi2)
    Q2 = np.einsum("sab,sa->sb", Qjoint[1], pi1)
    return ExactQ(V, Qjoint, Q1, Q2, residual, it)


def deviation_gains(eq: ExactQ, pi_partner, seat: int) -> np.ndarray:
    """(S, A) one-shot deviation gain of ``seat`` relative to its own policy."""
    q = eq.q(seat)
    return q - (q * pi_partner).sum(1, keepdims=True)


def compound_values(game: TabularGame, coop, defect, k_max: int, discount: float) -> np.ndarray:
    """``out[k, i, s]`` = V_i(s, π^{D_k C}, π^{D_k C}) for k = 0..k_max."""
    vc = exact_q(game, coop[0], coop[1], discount).V
    jd = defect[0][:, :, None] * defect[1][:, None, :]
    r_d = np.einsum("sab,isab->is", jd, game.R)
    P_d = np.einsum("sab,sabt->st", jd, game.P)
    out = np.empty((k_max + 1,) + vc.shape)
    out[0] = vc
    for k in range(1, k_max + 1):
        out[k] = r_d + discount * out[k - 1] @ P_d.T
    return out


def exact_punishment_k(losses: np.ndarray, target: float, k_max: int) -> tuple[int, bool]:
    """Smallest k in 1..k_max with ``losses[k] >= target``; (k_max, False) if none."""
    hit = np.flatnonzero(losses[1:k_max + 1] >= target)
    if len(hit):
        return int(hit[0]) + 1, True
    return k_max, False


# --------------------------------------------------------------------------
# Theorem check


@dataclass
class TheoremReport:
    d_star: float
    value_gap: float
    discount: float
    condition_holds: bool
    bound: float
    best_response: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=float)


def check_theorem(game: TabularGame, coop, defect, discount: float, seat: int = 0) -> TheoremReport:
    """Sufficient condition for cooperation against an amTFT agent in ``seat``:
    min_s V_partner(s, C, C) - V_partner(s, D, D) > d* / δ, where d* is the
    partner's largest one-shot deviation gain under the cooperative pair."""
    if not game.tabular:
        raise OracleError("oracle requires tabular game")
    partner = 1 - seat
    eq_c = exact_q(game, coop[0], coop[1], discount)
    eq_d = exact_q(game, defect[0], defect[1], discount)
    gains = deviation_gains(eq_c, coop[partner], partner)
    d_star = max(0.0, float(gains.max()))
    gap = float((eq_c.V[partner] - eq_d.V[partner]).min())
    bound = d_star / discount if discount > 0 else np.inf
    return TheoremReport(d_star, gap, discount, bool(gap > bound), float(bound))


# --------------------------------------------------------------------------
# best response to an amTFT agent


@dataclass
class AugmentedMDP:
    """The partner's decision problem against a fixed exact-debit amTFT agent.

    States are (s, b, W): base state, amTFT's remaining punishment turns and
    its accumulated debit. ``trans[x][a]`` lists (prob, reward, next) triples.
    """

    states: list
    index: dict
    trans: list
    n_actions: int
    discount: float

    def evaluate(self, policy, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
        """Value of a stationary partner policy ``policy[x, a]`` on the augmented states."""
        V = np.zeros(len(self.states))
        for _ in range(max_iter):
            new = np.array([
                sum(policy[x][a] * sum(p * (r + self.discount * V[y]) for p, r, y in self.trans[x][a])
                    for a in range(self.n_actions))
                for x in range(len(self.states))
            ])
            if np.abs(new - V).max() < tol:
                return new
            V = new
        raise OracleError("augmented policy evaluation did not converge")

    def q_values(self, V) -> np.ndarray:
        return np.array([
            [sum(p * (r + self.discount * V[y]) for p, r, y in self.trans[x][a]) for a in range(self.n_actions)]
            for x in range(len(self.states))
        ])


def build_augmented_mdp(game: TabularGame, coop, defect, cfg, seat: int = 0, max_states: int = 100_000) -> AugmentedMDP:
    """Enumerate every (s, b, W) reachable from the initial distribution
    under any partner behaviour, with amTFT in ``seat`` using exact debits."""
    partner = 1 - seat
    T, alpha, k_max = cfg.threshold, cfg.alpha, cfg.k_max
    disc = cfg.discount
    eq_c = exact_q(game, coop[0], coop[1], disc)
    gains = deviation_gains(eq_c, coop[partner], partner)
    p_c_partner = coop[partner]
    comp = compound_values(game, coop, defect, k_max, disc)
    losses = comp[0, partner][None, :] - comp[:, partner, :]     # (k, s)

    def debit(s, a):
        if cfg.p_comply is None:
            ok = a == int(np.argmax(p_c_partner[s]))
        else:
            ok = p_c_partner[s, a] >= cfg.p_comply
        return 0.0 if ok else float(gains[s, a])

    def punish(s_next, W):
        target = alpha * (T if cfg.faithful_k_target else W)
        return exact_punishment_k(losses[:, s_next], target, k_max)[0]

    A_own, A_p = game.n_actions[seat], game.n_actions[partner]
    start = [(int(s), 0, 0.0) for s in np.flatnonzero(game.init)]
    index, states, trans = {}, [], []
    queue = []

    def key(x):
        s, b, W = x
        return (s, b, round(W, 9))

    def add(x):
        kx = key(x)
        if kx not in index:
            if len(states) >= max_states:
                raise OracleError(f"augmented state space exceeds {max_states} states")
            index[kx] = len(states)
            states.append(kx)
            trans.append(None)
            queue.append(kx)
        return index[kx]

    for x in start:
        add(x)
    infinite_t = not np.isfinite(T)
    while queue:
        x = queue.pop()
        s, b, W = x
        own_pi = (defect if b > 0 else coop)[seat][s]
        rows = []
        for a in range(A_p):
            outs = {}
            for a_own in range(A_own):
                p_own = own_pi[a_own]
                if p_own == 0:
                    continue
                a1, a2 = (a_own, a) if seat == 0 else (a, a_own)
                r = game.R[partner, s, a1, a2]
                for s2 in np.flatnonzero(game.P[s, a1, a2]):
                    p = p_own * game.P[s, a1, a2, s2]
                    if b > 0:
                        nxt = (int(s2), b - 1, W)
                    else:
                        W2 = 0.0 if infinite_t else W + debit(s, a)
                        if W2 > T:
                            nxt = (int(s2), punish(int(s2), W2), 0.0)
                        else:
                            nxt = (int(s2), 0, W2)
                    y = add(nxt)
                    outs[(y, r)] = outs.get((y, r), 0.0) + p
            rows.append([(p, r, y) for (y, r), p in outs.items()])
        trans[index[x]] = rows
    return AugmentedMDP(states, index, trans, A_p, disc)


def best_response_oracle(game: TabularGame, coop, defect, cfg, seat: int = 0, tol: float = 1e-10,
                         max_states: int = 100_000):
    """Value iteration for the partner of an exact-debit amTFT agent.

    Returns ``(policy, values, report)``: ``policy[x]`` is the greedy action
    at augmented state ``mdp.states[x]``; ``report`` classifies whether it
    follows the partner's cooperative policy in C phases (reachable under the
    best response) and the defect policy in D phases.
    """
    if not game.tabular:
        raise OracleError("oracle requires tabular game")
    mdp = build_augmented_mdp(game, coop, defect, cfg, seat, max_states)
    n = len(mdp.states)
    V = np.zeros(n)
    for _ in range(1_000_000):
        Q = mdp.q_values(V)
        new = Q.max(1)
        if np.abs(new - V).max() < tol:
            V = new
            break
        V = new
    Q = mdp.q_values(V)
    policy = Q.argmax(1)
    partner = 1 - seat

    # states reachable when the partner plays the best response
    reach, stack = set(), [mdp.index[(int(s), 0, 0.0)] for s in np.flatnonzero(game.init)]
    while stack:
        x = stack.pop()
        if x in reach:
            continue
        reach.add(x)
        stack.extend(y for p, r, y in mdp.trans[x][policy[x]] if p > 0)

    def optimal_actions(x):
        return set(np.flatnonzero(Q[x] >= Q[x].max() - 1e-9))

    coop_ok, defect_ok = True, True
    c_states = d_states = 0
    for x, (s, b, W) in enumerate(mdp.states):
        if b == 0 and x in reach:
            c_states += 1
            prescribed = set(np.flatnonzero(coop[partner][s] == coop[partner][s].max()))
            coop_ok &= bool(optimal_actions(x) & prescribed) and int(policy[x]) in prescribed
        elif b > 0:
            d_states += 1
            prescribed = set(np.flatnonzero(defect[partner][s] == defect[partner][s].max()))
            defect_ok &= bool(optimal_actions(x) & prescribed)
    start_value = float(np.mean([V[mdp.index[(int(s), 0, 0.0)]] for s in np.flatnonzero(game.init)]))
    report = {
        "cooperates_in_c_phase": bool(coop_ok),
        "defects_in_d_phase": bool(defect_ok),
        "c_phase_states": c_states,
        "d_phase_states": d_states,
        "augmented_states": n,
        "start_value": start_value,
        "always_defects": bool(all(
            int(policy[x]) in set(np.flatnonzero(defect[partner][s] == defect[partner][s].max()))
            for x, (s, b, W) in enumerate(mdp.states) if x in reach
        )),
    }
    return policy, V, report, mdp
