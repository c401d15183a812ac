// Book doctest sync; populated alongside the book chapters.
