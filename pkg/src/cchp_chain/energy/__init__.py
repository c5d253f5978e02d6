"""CCHP physics and the leader-follower trading game."""
