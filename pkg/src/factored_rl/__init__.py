"""Online learning in factored MDPs: optimistic and posterior-sampling agents."""
