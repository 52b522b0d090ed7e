"""Green matrices of non-homogeneous elliptic operators on 3-D grids."""
