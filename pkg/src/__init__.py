# DuoField - disentangled shape/texture radiance fields
# Modules: autodiff, camera, field, render, optim, train, inference, data, mesh, metrics, checkpoint, config, commands
