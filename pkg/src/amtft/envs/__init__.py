"""Concrete games, looked up by string id."""

from amtft.envs.coins import CoinsGame, CoinsParams, CoinsState, coins_game, decode_coins, encode_coins
from amtft.envs.pd import PdGame, PdParams, encode_pd, pd_game
from amtft.envs.tabular import TabularGame

GAMES = {
    "rpd": lambda **kw: pd_game(PdParams(**kw)),
    "coins": lambda **kw: coins_game(CoinsParams(**kw)),
}


def make_game(game_id: str, **params):
    try:
        factory = GAMES[game_id]
    except KeyError:
        raise KeyError(f"unknown game id {game_id!r}; expected one of {sorted(GAMES)}") from None
    return factory(**params)


__all__ = [
    "CoinsGame", "CoinsParams", "CoinsState", "PdGame", "PdParams", "TabularGame",
    "coins_game", "decode_coins", "encode_coins", "encode_pd", "make_game", "pd_game",
]
