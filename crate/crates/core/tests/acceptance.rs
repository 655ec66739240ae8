// acceptance criteria suite (filled in as modules land)
